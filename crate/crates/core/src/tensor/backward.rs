use nalgebra::Matrix3;

use super::kernels::{
    col2im, gemm, im2col, index_map, permute, resize_taps, shared_rhs, tanh, BroadcastPlan,
};
use super::tape::{conv_geom, sigmoid, Gradients, Op, ReduceKind, Tape, Unary, Var};
use super::{numel, split_at_axis, Real};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// Reverse sweep from a scalar `loss`. Visits every node in strictly
    /// decreasing id order once. The tape cannot be swept twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.is_consumed() {
            return Err(Error::TapeConsumed);
        }
        if !self.shape(loss).is_empty() && numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.mark_consumed();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let needs = |i: usize| self.nodes[inputs[i]].requires_grad;
        let val = |i: usize| self.nodes[inputs[i]].value.as_slice();
        let shp = |i: usize| self.nodes[inputs[i]].shape.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub if shp(0) == node.shape.as_slice() => {
                // lhs has the output shape; the rhs gradient folds over its
                // broadcast axes
                if needs(0) {
                    accumulate(grads, inputs[0], g.to_vec());
                }
                if needs(1) {
                    let mut gb = vec![T::zero(); val(1).len()];
                    BroadcastPlan::new(&node.shape, shp(0), shp(1))
                        .for_each(g.len(), |i, _, ib| gb[ib] += g[i]);
                    if matches!(node.op, Op::Sub) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, inputs[1], gb);
                }
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let plan = BroadcastPlan::new(&node.shape, shp(0), shp(1));
                let (va, vb) = (val(0), val(1));
                let mut ga = needs(0).then(|| vec![T::zero(); va.len()]);
                let mut gb = needs(1).then(|| vec![T::zero(); vb.len()]);
                plan.for_each(g.len(), |i, ia, ib| {
                    let gi = g[i];
                    let (da, db) = match node.op {
                        Op::Add => (gi, gi),
                        Op::Sub => (gi, -gi),
                        Op::Mul => (gi * vb[ib], gi * va[ia]),
                        _ => (gi / vb[ib], -gi * va[ia] / (vb[ib] * vb[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, inputs[0], ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, inputs[1], gb);
                }
            }
            Op::Unary(u) => {
                let x = val(0);
                let y = &node.value;
                let dx: Vec<T> = (0..g.len())
                    .map(|i| g[i] * unary_derivative(*u, x[i], y[i]))
                    .collect();
                accumulate(grads, inputs[0], dx);
            }
            Op::MatMul {
                a_map,
                b_map,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(0), val(1));
                let shared = shared_rhs(a_map, b_map);
                let nb = a_map.len();
                if needs(0) {
                    let mut ga = vec![T::zero(); va.len()];
                    if shared {
                        gemm(g, vb, &mut ga, nb * m, n, k, false, true);
                    }
                    for (i, &ai) in a_map.iter().enumerate().filter(|_| !shared) {
                        let bo = b_map[i] * k * n;
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[bo..bo + k * n],
                            &mut ga[ai * m * k..(ai + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    accumulate(grads, inputs[0], ga);
                }
                if needs(1) {
                    let mut gb = vec![T::zero(); vb.len()];
                    if shared {
                        gemm(va, g, &mut gb, k, nb * m, n, true, false);
                    }
                    for (i, &bi) in b_map.iter().enumerate().filter(|_| !shared) {
                        let ao = a_map[i] * m * k;
                        gemm(
                            &va[ao..ao + m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                    accumulate(grads, inputs[1], gb);
                }
            }
            Op::Reshape => accumulate(grads, inputs[0], g.to_vec()),
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = permute(g, &node.shape, &inv);
                accumulate(grads, inputs[0], dx);
            }
            Op::BroadcastTo => {
                let map = index_map(&node.shape, shp(0));
                let mut dx = vec![T::zero(); val(0).len()];
                for (i, &src) in map.iter().enumerate() {
                    dx[src] += g[i];
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::Concat { axis, sizes } => {
                let total: usize = sizes.iter().sum();
                let (outer, _, inner) = split_at_axis(&node.shape, *axis);
                let mut offset = 0;
                for (slot, &sz) in sizes.iter().enumerate() {
                    if needs(slot) {
                        let mut dx = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        accumulate(grads, inputs[slot], dx);
                    }
                    offset += sz;
                }
            }
            Op::Narrow { axis, start } => {
                let in_shape = shp(0);
                let (outer, n, inner) = split_at_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::IndexSelect(idx) => {
                let row = numel(&node.shape[1..]);
                let mut dx = vec![T::zero(); val(0).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..row {
                        dx[i * row + j] += g[r * row + j];
                    }
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::GatherLast(idx) => {
                let c = shp(0)[1];
                let mut dx = vec![T::zero(); val(0).len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] += g[r];
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::Softmax { axis, scale } => {
                let (outer, n, inner) = split_at_axis(&node.shape, *axis);
                let y = &node.value;
                let s = T::lit(*scale);
                let mut dx = vec![T::zero(); y.len()];
                if inner == 1 {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |a, (&gi, &yi)| a + gi * yi);
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = s * yi * (gi - dot);
                        }
                    }
                }
                for o in 0..outer {
                    for i in (0..inner).filter(|_| inner > 1) {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            dx[at(j)] = s * y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::LogSoftmax { axis } => {
                let (outer, n, inner) = split_at_axis(&node.shape, *axis);
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut gs = T::zero();
                        for j in 0..n {
                            gs += g[at(j)];
                        }
                        for j in 0..n {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::LayerNorm { xhat, rstd } => {
                let d = *node.shape.last().expect("rank >= 1");
                let rows = g.len() / d;
                let gamma = val(1);
                let dn = T::lit(d as f64);
                if needs(0) {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    accumulate(grads, inputs[0], dx);
                }
                if needs(1) || needs(2) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    if needs(1) {
                        accumulate(grads, inputs[1], dg);
                    }
                    if needs(2) {
                        accumulate(grads, inputs[2], db);
                    }
                }
            }
            Op::L2Normalize { norms } => {
                let d = *node.shape.last().expect("rank >= 1");
                let y = &node.value;
                let mut dx = vec![T::zero(); g.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += y[r * d + j] * g[r * d + j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = (g[r * d + j] - y[r * d + j] * dot) / nrm;
                    }
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::Reduce { kind, axis, argmax } => {
                let in_shape = shp(0);
                let mut dx = vec![T::zero(); numel(in_shape)];
                match kind {
                    ReduceKind::Max => {
                        for (r, &src) in argmax.iter().enumerate() {
                            dx[src] += g[r];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (outer, n, inner) = match axis {
                            None => (1, dx.len(), 1),
                            Some(a) => split_at_axis(in_shape, *a),
                        };
                        let scale = if *kind == ReduceKind::Mean {
                            T::one() / T::lit(n as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, inputs[0], dx);
            }
            Op::Conv2d { stride, pad } => {
                let sx = shp(0);
                let sw = shp(1);
                let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let geo = conv_geom(cin, h, w, kh, kw, *stride, *pad);
                let (p, ncol) = (geo.positions(), geo.cols());
                let (vx, vw) = (val(0), val(1));
                let mut cols = vec![T::zero(); ncol * p];
                let mut dw = needs(1).then(|| vec![T::zero(); vw.len()]);
                let mut dx = needs(0).then(|| vec![T::zero(); vx.len()]);
                let mut dcols = vec![T::zero(); ncol * p];
                for bi in 0..b {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col(
                            &vx[bi * cin * h * w..(bi + 1) * cin * h * w],
                            &geo,
                            &mut cols,
                        );
                        gemm(gb, &cols, dw, cout, p, ncol, false, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm(vw, gb, &mut dcols, ncol, cout, p, true, false);
                        col2im(
                            &dcols,
                            &geo,
                            &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                        );
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, inputs[0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, inputs[1], dw);
                }
            }
            Op::Resize => {
                let sx = shp(0);
                let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                if (h, w) == (oh, ow) {
                    accumulate(grads, inputs[0], g.to_vec());
                } else {
                    let ty = resize_taps(h, oh);
                    let tx = resize_taps(w, ow);
                    let mut dx = vec![T::zero(); bc * h * w];
                    for c in 0..bc {
                        let src = &g[c * oh * ow..(c + 1) * oh * ow];
                        let dst = &mut dx[c * h * w..(c + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let ly = T::lit(ly);
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let lx = T::lit(lx);
                                let gv = src[oy * ow + ox];
                                let top = gv * (T::one() - ly);
                                let bot = gv * ly;
                                dst[y0 * w + x0] += top * (T::one() - lx);
                                dst[y0 * w + x1] += top * lx;
                                dst[y1 * w + x0] += bot * (T::one() - lx);
                                dst[y1 * w + x1] += bot * lx;
                            }
                        }
                    }
                    accumulate(grads, inputs[0], dx);
                }
            }
            Op::So3(saved) => {
                let mut dx = Vec::with_capacity(g.len());
                for (b, s) in saved.iter().enumerate() {
                    let gm = Matrix3::from_fn(|i, j| g[b * 9 + i * 3 + j].as_f64());
                    let a = s.v.transpose() * (s.r.transpose() * gm) * s.v;
                    let bt = Matrix3::from_fn(|i, j| {
                        if i == j {
                            0.0
                        } else {
                            (a[(i, j)] - a[(j, i)]) / (s.s[i] + s.s[j])
                        }
                    });
                    let dm = s.r * s.v * bt * s.v.transpose();
                    dx.extend(dm.transpose().iter().map(|&x| T::lit(x)));
                }
                accumulate(grads, inputs[0], dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn unary_derivative<T: Real>(u: Unary, x: T, y: T) -> T {
    let one = T::one();
    match u {
        Unary::Neg => -one,
        Unary::Scale(c) => T::lit(c),
        Unary::AddScalar(_) => one,
        Unary::Exp => y,
        Unary::Log => one / x,
        Unary::Sqrt => T::lit(0.5) / y,
        Unary::Square => T::lit(2.0) * x,
        Unary::Relu => {
            if x > T::zero() {
                one
            } else {
                T::zero()
            }
        }
        Unary::Gelu => {
            let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let c = T::lit(0.044715);
            let t = tanh(k * (x + c * x * x * x));
            T::lit(0.5) * (one + t)
                + T::lit(0.5) * x * (one - t * t) * k * (one + T::lit(3.0) * c * x * x)
        }
        Unary::Sigmoid => y * (one - y),
        Unary::Softplus => sigmoid(x),
        Unary::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
        Unary::Acos(eps) => {
            let lim = one - T::lit(eps);
            let xc = x.max(-lim).min(lim);
            -one / (one - xc * xc).sqrt()
        }
        Unary::Cos => -x.sin(),
        Unary::SmoothL1(beta) => {
            let b = T::lit(beta);
            if x.abs() < b {
                x / b
            } else {
                x.signum()
            }
        }
        Unary::Clamp(lo, hi) => {
            if x >= T::lit(lo) && x <= T::lit(hi) {
                one
            } else {
                T::zero()
            }
        }
    }
}
