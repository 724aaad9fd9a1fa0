use std::collections::{BTreeMap, HashMap};

use nalgebra::Matrix3;

use super::kernels::{
    gemm, im2col, index_map, permute, resize_taps, shared_rhs, tanh, BroadcastPlan, ConvGeom,
};
use super::{broadcast_shapes, cost, normalize_axis, numel, split_at_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Model partition used for FLOPs and latency attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Decoder,
    Heads,
    Loss,
    Other,
}

impl Component {
    pub const MODEL: [Component; 3] = [Component::Backbone, Component::Decoder, Component::Heads];

    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Decoder => "decoder",
            Component::Heads => "heads",
            Component::Loss => "loss",
            Component::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
    /// acos of the input clipped to [-1, 1]; the derivative is evaluated at
    /// the input clipped to ±(1 - eps) so it stays finite.
    Acos(f64),
    Cos,
    SmoothL1(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
pub(crate) struct So3Saved {
    pub r: Matrix3<f64>,
    pub v: Matrix3<f64>,
    pub s: [f64; 3],
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Unary(Unary),
    MatMul {
        a_map: Vec<usize>,
        b_map: Vec<usize>,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape,
    Permute(Vec<usize>),
    BroadcastTo,
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
    },
    IndexSelect(Vec<usize>),
    GatherLast(Vec<usize>),
    Softmax {
        axis: usize,
        scale: f64,
    },
    LogSoftmax {
        axis: usize,
    },
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reduce {
        kind: ReduceKind,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Resize,
    So3(Vec<So3Saved>),
    L2Normalize {
        norms: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Unary(u) => match u {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Relu => "relu",
                Unary::Gelu => "gelu",
                Unary::Sigmoid => "sigmoid",
                Unary::Softplus => "softplus",
                Unary::Abs => "abs",
                Unary::Acos(_) => "acos",
                Unary::Cos => "cos",
                Unary::SmoothL1(_) => "smooth_l1",
                Unary::Clamp(..) => "clamp",
            },
            Op::MatMul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::BroadcastTo => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect(_) => "index_select",
            Op::GatherLast(_) => "gather_last",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize => "bilinear_resize",
            Op::So3(_) => "so3_project",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
    pub component: Component,
    pub flops: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

/// Append-only record of a forward pass. Single use: `backward` may run once.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    component: Component,
    consumed: bool,
    /// Raise errors on domain violations instead of producing NaN.
    pub strict: bool,
    capture_attention: bool,
    attention: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            component: Component::Other,
            consumed: false,
            strict: T::STRICT,
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the component subsequent nodes are attributed to; returns the
    /// previous one.
    pub fn set_component(&mut self, c: Component) -> Component {
        std::mem::replace(&mut self.component, c)
    }

    pub fn component(&self) -> Component {
        self.component
    }

    /// Debug mode: attention blocks log their weight matrices.
    pub fn set_capture_attention(&mut self, on: bool) {
        self.capture_attention = on;
    }

    pub fn capture_attention(&self) -> bool {
        self.capture_attention
    }

    pub(crate) fn log_attention(&mut self, name: &str, weights: Var) {
        if self.capture_attention {
            self.attention.push((name.to_string(), weights));
        }
    }

    pub fn attention_log(&self) -> &[(String, Var)] {
        &self.attention
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Total FLOPs recorded per component; components with no cost are absent.
    pub fn flops_by_component(&self) -> HashMap<Component, u64> {
        let mut out = HashMap::new();
        for n in self.nodes.iter().filter(|n| n.flops > 0) {
            *out.entry(n.component).or_insert(0) += n.flops;
        }
        out
    }

    /// FLOPs per (component, op name); only ops with a nonzero cost appear.
    pub fn flops_by_op(&self) -> BTreeMap<(Component, &'static str), u64> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| n.flops > 0) {
            *out.entry((n.component, n.op.name())).or_insert(0) += n.flops;
        }
        out
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// Parameters bound on this tape, in bind order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub(crate) fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub(crate) fn mark_consumed(&mut self) {
        self.consumed = true;
    }

    fn push(
        &mut self,
        value: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
        inputs: Vec<usize>,
        flops: u64,
    ) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            inputs,
            requires_grad,
            component: self.component,
            flops,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf. It is differentiable iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            value: tensor.into_data(),
            shape,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            component: self.component,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.leaf(Tensor::from_f64(shape, data)?))
    }

    /// Binds a named parameter once per tape; later binds return the same node.
    pub fn bind_param(&mut self, name: &str, tensor: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid param");
        t.requires_grad = tensor.requires_grad;
        let v = self.leaf(t);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        op: Op<T>,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(name, &sa, &sb)?;
        let len = numel(&out_shape);
        let plan = BroadcastPlan::new(&out_shape, &sa, &sb);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![T::zero(); len];
        plan.for_each(len, |i, ia, ib| out[i] = f(va[ia], vb[ib]));
        if T::STRICT && self.strict && matches!(op, Op::Div) && vb.iter().any(|x| x.is_zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        Ok(self.push(
            out,
            out_shape,
            op,
            vec![a.0, b.0],
            len as u64 * cost::ELEMENTWISE,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if matches!(u, Unary::Log) && T::STRICT && self.strict {
            if let Some(bad) = vx.iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out: Vec<T> = vx.iter().map(|&v| unary_forward(u, v)).collect();
        let per = if matches!(u, Unary::Gelu) {
            cost::GELU
        } else {
            cost::ELEMENTWISE
        };
        let flops = out.len() as u64 * per;
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Unary(u), vec![x.0], flops))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    /// `acos` with the input clipped to [-1, 1]. The backward rule evaluates
    /// the derivative at ±(1 - eps) near the endpoints.
    pub fn acos(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(Unary::Acos(eps), x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Cos, x)
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        self.unary(Unary::SmoothL1(beta), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    // ---------------------------------------------------------------- matmul

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch =
            broadcast_shapes("matmul", ba, bb).map_err(|_| Error::shape("matmul", &sa, &sb))?;
        let a_map = index_map(&batch, ba);
        let b_map = index_map(&batch, bb);
        let nb = numel(&batch);
        let mut out = vec![T::zero(); nb * m * n];
        {
            let va = self.value(a);
            let vb = self.value(b);
            if shared_rhs(&a_map, &b_map) {
                gemm(va, vb, &mut out, nb * m, k, n, false, false);
            } else {
                for i in 0..nb {
                    let ao = a_map[i] * m * k;
                    let bo = b_map[i] * k * n;
                    gemm(
                        &va[ao..ao + m * k],
                        &vb[bo..bo + k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        false,
                        false,
                    );
                }
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let flops = 2 * (nb * m * k * n) as u64;
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a_map,
                b_map,
                m,
                k,
                n,
            },
            vec![a.0, b.0],
            flops,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                ndim: nd,
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(v, shape.to_vec(), Op::Reshape, vec![x.0], 0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let (out, out_shape) = permute(self.value(x), &shape, perm);
        Ok(self.push(out, out_shape, Op::Permute(perm.to_vec()), vec![x.0], 0))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let target = broadcast_shapes("broadcast_to", &sx, shape)?;
        if target != shape {
            return Err(Error::shape("broadcast_to", &sx, shape));
        }
        let map = index_map(shape, &sx);
        let vx = self.value(x);
        let out: Vec<T> = map.iter().map(|&i| vx[i]).collect();
        Ok(self.push(out, shape.to_vec(), Op::BroadcastTo, vec![x.0], 0))
    }

    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let axis = normalize_axis("concat", axis, base.len())?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != base[d])
            {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let v = self.value(x);
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            out,
            shape,
            Op::Concat { axis, sizes },
            xs.iter().map(|v| v.0).collect(),
            0,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow: range {start}..{} out of bounds for axis of size {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.push(out, s, Op::Narrow { axis, start }, vec![x.0], 0))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::invalid(format!(
                "index_select: index out of range for shape {shape:?}"
            )));
        }
        let row = numel(&shape[1..]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut s = shape;
        s[0] = indices.len();
        Ok(self.push(out, s, Op::IndexSelect(indices.to_vec()), vec![x.0], 0))
    }

    /// `out[r] = x[r, idx[r]]` for `x` of shape `[N, C]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::shape("gather_last", &shape, &[idx.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!(
                "gather_last: class {bad} out of range for {c} classes"
            )));
        }
        let v = self.value(x);
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &i)| v[r * c + i]).collect();
        Ok(self.push(
            out,
            vec![idx.len()],
            Op::GatherLast(idx.to_vec()),
            vec![x.0],
            0,
        ))
    }

    // ---------------------------------------------------------- normalizers

    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        self.softmax_scaled(x, axis, 1.0)
    }

    /// `softmax(scale * x)` along `axis`, computed with max subtraction.
    pub fn softmax_scaled(&mut self, x: Var, axis: isize, scale: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis("softmax", axis, shape.len())?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let s = T::lit(scale);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        if inner == 1 {
            for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
                let mx = src.iter().fold(T::neg_infinity(), |m, &x| m.max(s * x));
                let mut z = T::zero();
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = (s * x - mx).exp();
                    z += *d;
                }
                let r = T::one() / z;
                dst.iter_mut().for_each(|d| *d *= r);
            }
            let flops = v.len() as u64 * cost::SOFTMAX;
            return Ok(self.push(out, shape, Op::Softmax { axis, scale }, vec![x.0], flops));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(s * v[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    let e = (s * v[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let flops = v.len() as u64 * cost::SOFTMAX;
        Ok(self.push(out, shape, Op::Softmax { axis, scale }, vec![x.0], flops))
    }

    pub fn log_softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis("log_softmax", axis, shape.len())?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(v[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    z += (v[at(j)] - mx).exp();
                }
                let lse = mx + z.ln();
                for j in 0..n {
                    out[at(j)] = v[at(j)] - lse;
                }
            }
        }
        let flops = v.len() as u64 * cost::LOG_SOFTMAX;
        Ok(self.push(out, shape, Op::LogSoftmax { axis }, vec![x.0], flops))
    }

    /// Normalizes the last axis to zero mean / unit (population) variance,
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let rows = numel(&shape) / d;
        let v = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let dn = T::lit(d as f64);
        let mut out = vec![T::zero(); v.len()];
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let flops = v.len() as u64 * cost::LAYER_NORM;
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm { xhat, rstd },
            vec![x.0, gamma.0, beta.0],
            flops,
        ))
    }

    /// Divides rows of the last axis by `sqrt(|x|^2 + eps^2)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", &shape, &[]))?;
        let rows = numel(&shape) / d;
        let v = self.value(x);
        let e2 = T::lit(eps * eps);
        let mut out = vec![T::zero(); v.len()];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let n = (row.iter().map(|&u| u * u).sum::<T>() + e2).sqrt();
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let flops = v.len() as u64 * cost::L2_NORMALIZE;
        Ok(self.push(out, shape, Op::L2Normalize { norms }, vec![x.0], flops))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var, axis: Option<isize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<isize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: Option<isize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    /// Reduces over `axis` (removing it) or over everything (scalar result).
    /// Max routes its subgradient to the first maximal index.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<isize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner, out_shape, ax) = match axis {
            None => (1, numel(&shape), 1, vec![], None),
            Some(a) => {
                let a = normalize_axis("reduce", a, shape.len())?;
                let (o, n, i) = split_at_axis(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                (o, n, i, s, Some(a))
            }
        };
        let v = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let r = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += v[at(j)];
                        }
                        out[r] = if kind == ReduceKind::Mean {
                            acc / T::lit(n as f64)
                        } else {
                            acc
                        };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if v[at(j)] > v[at(best)] {
                                best = j;
                            }
                        }
                        argmax[r] = at(best);
                        out[r] = v[at(best)];
                    }
                }
            }
        }
        let flops = v.len() as u64 * cost::REDUCE;
        Ok(self.push(
            out,
            out_shape,
            Op::Reduce {
                kind,
                axis: ax,
                argmax,
            },
            vec![x.0],
            flops,
        ))
    }

    // -------------------------------------------------------------- spatial

    /// Cross-correlation of `x [B,Cin,H,W]` with `w [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::KernelTooLarge {
                kernel: [kh, kw],
                input: [h + 2 * pad, wd + 2 * pad],
            });
        }
        let g = conv_geom(cin, h, wd, kh, kw, stride, pad);
        let (p, ncol) = (g.positions(), g.cols());
        let mut out = vec![T::zero(); b * cout * p];
        let mut cols = vec![T::zero(); ncol * p];
        let vx = self.value(x);
        let vw = self.value(w);
        for bi in 0..b {
            im2col(
                &vx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                &g,
                &mut cols,
            );
            gemm(
                vw,
                &cols,
                &mut out[bi * cout * p..(bi + 1) * cout * p],
                cout,
                ncol,
                p,
                false,
                false,
            );
        }
        let flops = 2 * (b * cout * ncol * p) as u64;
        let shape = vec![b, cout, g.ho, g.wo];
        Ok(self.push(
            out,
            shape,
            Op::Conv2d { stride, pad },
            vec![x.0, w.0],
            flops,
        ))
    }

    /// Bilinear resize of `[B,C,H,W]` with align-corners=false sampling.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("bilinear_resize", &sx, &[out_h, out_w]));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "bilinear_resize: output size must be positive",
            ));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let v = self.value(x);
        let out = if (h, w) == (out_h, out_w) {
            v.to_vec()
        } else {
            let ty = resize_taps(h, out_h);
            let tx = resize_taps(w, out_w);
            let mut out = vec![T::zero(); bc * out_h * out_w];
            for c in 0..bc {
                let src = &v[c * h * w..(c + 1) * h * w];
                let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::lit(ly);
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::lit(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
                    }
                }
            }
            out
        };
        let flops = if (h, w) == (out_h, out_w) {
            0
        } else {
            out.len() as u64 * cost::BILINEAR
        };
        Ok(self.push(
            out,
            vec![sx[0], sx[1], out_h, out_w],
            Op::Resize,
            vec![x.0],
            flops,
        ))
    }

    // ------------------------------------------------------------ rotations

    /// Projects each `[3,3]` matrix of `m [B,3,3]` onto SO(3), the nearest
    /// rotation in Frobenius norm: `R = U diag(1,1,det(UV^T)) V^T`.
    pub fn so3_project(&mut self, m: Var) -> Result<Var> {
        let shape = self.shape(m).to_vec();
        if shape.len() != 3 || shape[1] != 3 || shape[2] != 3 {
            return Err(Error::shape("so3_project", &shape, &[3, 3]));
        }
        let v = self.value(m);
        let mut out = Vec::with_capacity(v.len());
        let mut saved = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let mat = Matrix3::from_fn(|i, j| v[b * 9 + i * 3 + j].as_f64());
            let s = so3_polar(&mat)?;
            out.extend(s.r.transpose().iter().map(|&x| T::lit(x)));
            saved.push(s);
        }
        let flops = shape[0] as u64 * cost::SO3_PROJECTION;
        Ok(self.push(out, shape, Op::So3(saved), vec![m.0], flops))
    }
}

pub(crate) fn conv_geom(
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ConvGeom {
    ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    }
}

/// Polar factor `M = R S` with `R` in SO(3); `S = V diag(s) V^T` where `s`
/// carries the determinant sign on the smallest singular value.
pub(crate) fn so3_polar(m: &Matrix3<f64>) -> Result<So3Saved> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let sig = [sv[order[0]], sv[order[1]], sv[order[2]]];
    if !(sig[0] > 0.0) || !(sig[2] > 1e-10 * sig[0]) {
        return Err(Error::DegenerateRotation(sig));
    }
    let v = vt.transpose();
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    let d = (u * v.transpose()).determinant().signum();
    let dm = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = u * dm * v.transpose();
    Ok(So3Saved {
        r,
        v,
        s: [sig[0], sig[1], d * sig[2]],
    })
}

#[inline]
pub(crate) fn unary_forward<T: Real>(u: Unary, x: T) -> T {
    match u {
        Unary::Neg => -x,
        Unary::Scale(c) => x * T::lit(c),
        Unary::AddScalar(c) => x + T::lit(c),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => {
            let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let inner = k * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (T::one() + tanh(inner))
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        Unary::Abs => x.abs(),
        Unary::Acos(_) => x.max(-T::one()).min(T::one()).acos(),
        Unary::Cos => x.cos(),
        Unary::SmoothL1(beta) => {
            let b = T::lit(beta);
            let a = x.abs();
            if a < b {
                T::lit(0.5) * x * x / b
            } else {
                a - T::lit(0.5) * b
            }
        }
        Unary::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
