//! Raw loops shared by forward and backward rules. All loops have a fixed
//! summation order so results do not depend on scheduling.

use super::{numel, strides, Real};

/// `c[m,n] += op(a)[m,k] · op(b)[k,n]`. With `ta` the buffer `a` is stored
/// as `[k,m]`; with `tb` the buffer `b` is stored as `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let sa = if ta { (1, m as isize) } else { (k as isize, 1) };
    let sb = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, a, sa, b, sb, c, n as isize);
}

/// True when every batch entry of a matmul reads the same rhs and the lhs
/// batches are laid out in order, so the product is one tall gemm.
pub(crate) fn shared_rhs(a_map: &[usize], b_map: &[usize]) -> bool {
    b_map.iter().all(|&j| j == 0) && a_map.iter().enumerate().all(|(i, &j)| i == j)
}

/// `tanh` through a single `exp`, several times cheaper than the libm
/// routine; saturates beyond |x| = 20 where both round to ±1.
#[inline]
pub(crate) fn tanh<T: Real>(x: T) -> T {
    let lim = T::lit(20.0);
    if x > lim {
        return T::one();
    }
    if x < -lim {
        return -T::one();
    }
    T::one() - T::lit(2.0) / ((x + x).exp() + T::one())
}

/// For every element of a broadcast output, the flat offsets into the two
/// (trailing-aligned) inputs.
pub(crate) enum BroadcastPlan {
    Same,
    /// rhs is a suffix of the output shape; lhs is the output shape.
    RhsSuffix(usize),
    /// lhs is a suffix of the output shape; rhs is the output shape.
    LhsSuffix(usize),
    General(Vec<usize>, Vec<usize>),
}

impl BroadcastPlan {
    pub fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        if a == out && b == out {
            return BroadcastPlan::Same;
        }
        if a == out && out.ends_with(b) {
            return BroadcastPlan::RhsSuffix(numel(b));
        }
        if b == out && out.ends_with(a) {
            return BroadcastPlan::LhsSuffix(numel(a));
        }
        BroadcastPlan::General(index_map(out, a), index_map(out, b))
    }

    #[inline]
    pub fn for_each(&self, len: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            BroadcastPlan::Same => (0..len).for_each(|i| f(i, i, i)),
            BroadcastPlan::RhsSuffix(r) => (0..len)
                .step_by(*r)
                .for_each(|base| (0..*r).for_each(|j| f(base + j, base + j, j))),
            BroadcastPlan::LhsSuffix(r) => (0..len)
                .step_by(*r)
                .for_each(|base| (0..*r).for_each(|j| f(base + j, j, base + j))),
            BroadcastPlan::General(ma, mb) => (0..len).for_each(|i| f(i, ma[i], mb[i])),
        }
    }
}

/// Flat source offset for each element of `out` when `src` is broadcast to it.
pub(crate) fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let src_strides = strides(src);
    let mut bstride = vec![0usize; nd];
    for d in 0..src.len() {
        let od = nd - src.len() + d;
        if src[d] != 1 {
            bstride[od] = src_strides[d];
        }
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += bstride[d];
            if idx[d] < out[d] {
                break;
            }
            off -= bstride[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// General axis permutation of a row-major buffer.
pub(crate) fn permute<T: Copy>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let nd = shape.len();
    if nd > 1 && perm[nd - 1] == nd - 1 && total > 0 {
        // trailing axis kept: copy contiguous rows
        let row = shape[nd - 1];
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd - 1];
        let mut off = 0usize;
        for _ in 0..total / row {
            out.extend_from_slice(&data[off..off + row]);
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        return (out, out_shape);
    }
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin,h,w]` into `[cin*kh*kw, ho*wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of an align-corners=false bilinear resize:
/// `(i0, i1, weight of i1)` per output position.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}
