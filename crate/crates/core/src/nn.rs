//! Named parameters and the parameterized blocks built on the tape.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{finite_diff_grad, gradcheck, max_relative_error, Real, Tape, Tensor, Var};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    XavierUniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub init: InitScheme,
}

/// Ordered map from dotted parameter path to tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Declares a zero-filled trainable tensor; values are set by
    /// [`init_params`] or by a checkpoint load.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: InitScheme) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let tensor = Tensor::zeros(shape).with_grad();
        self.entries
            .insert(name.to_string(), Param { tensor, init });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing entry; the shape must match.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let t = self.get_mut(name)?;
        if data.len() != t.numel() {
            let shape = t.shape().to_vec();
            return Err(Error::shape("set_param", &shape, &[data.len()]));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        Ok(tape.bind_param(name, self.get(name)?))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalars across entries whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let mut t = p.tensor.cast::<U>();
                    t.requires_grad = true;
                    (
                        k.clone(),
                        Param {
                            tensor: t,
                            init: p.init,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Fills every entry according to its scheme, in declaration order.
pub fn init_params<T: Real>(reg: &mut ParamRegistry<T>, rng: &mut Rng) {
    for (_, p) in reg.iter_mut() {
        match p.init {
            InitScheme::Zeros => p.tensor.data_mut().fill(T::zero()),
            InitScheme::Ones => p.tensor.data_mut().fill(T::one()),
            InitScheme::XavierUniform => {
                let (fan_in, fan_out) = fans(p.tensor.shape());
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in p.tensor.data_mut() {
                    *v = T::lit(rng.range(-bound, bound));
                }
            }
        }
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], shape[0]),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            (shape[1] * receptive, shape[0] * receptive)
        }
    }
}

/// `x · wᵀ + b` over the last axis of `x`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(w).to_vec();
    let inp = *sx.last().ok_or_else(|| Error::shape("linear", &sx, &sw))?;
    if sw.len() != 2 || sw[1] != inp || tape.shape(b) != [sw[0]] {
        return Err(Error::shape("linear", &sx, &sw));
    }
    let wt = tape.transpose(w)?;
    if sx.len() == 1 {
        let row = tape.reshape(x, &[1, inp])?;
        let y = tape.matmul(row, wt)?;
        let y = tape.reshape(y, &[sw[0]])?;
        return tape.add(y, b);
    }
    let y = tape.matmul(x, wt)?;
    tape.add(y, b)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        reg.declare(&weight, &[out_dim, in_dim], InitScheme::XavierUniform)?;
        reg.declare(&bias, &[out_dim], InitScheme::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let w = reg.bind(tape, &self.weight)?;
        let b = reg.bind(tape, &self.bias)?;
        linear(tape, x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, dim: usize) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        reg.declare(&gain, &[dim], InitScheme::Ones)?;
        reg.declare(&bias, &[dim], InitScheme::Zeros)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let g = reg.bind(tape, &self.gain)?;
        let b = reg.bind(tape, &self.bias)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub cfg: AttentionConfig,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            name: prefix.to_string(),
            cfg,
            q_proj: Linear::new(reg, &format!("{prefix}.q_proj"), d, d)?,
            k_proj: Linear::new(reg, &format!("{prefix}.k_proj"), d, d)?,
            v_proj: Linear::new(reg, &format!("{prefix}.v_proj"), d, d)?,
            out_proj: Linear::new(reg, &format!("{prefix}.out_proj"), d, d)?,
        })
    }

    /// Unmasked attention of `q_in` [B, Lq, D] over `kv_in` [B, Lk, D].
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        q_in: Var,
        kv_in: Var,
    ) -> Result<Var> {
        let sq = tape.shape(q_in).to_vec();
        let sk = tape.shape(kv_in).to_vec();
        let d = self.cfg.model_dim;
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != d || sk[2] != d {
            return Err(Error::shape("multi_head_attention", &sq, &sk));
        }
        let (b, lq, lk) = (sq[0], sq[1], sk[1]);
        let (h, hd) = (self.cfg.num_heads, self.cfg.head_dim());

        let q = self.q_proj.forward(tape, reg, q_in)?;
        let k = self.k_proj.forward(tape, reg, kv_in)?;
        let v = self.v_proj.forward(tape, reg, kv_in)?;
        let q = split_heads(tape, q, b, lq, h, hd)?;
        let k = split_heads(tape, k, b, lk, h, hd)?;
        let v = split_heads(tape, v, b, lk, h, hd)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let weights = tape.softmax_scaled(scores, -1, 1.0 / (hd as f64).sqrt())?;
        tape.log_attention(&self.name, weights);
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, lq, d])?;
        self.out_proj.forward(tape, reg, ctx)
    }
}

fn split_heads<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    b: usize,
    l: usize,
    h: usize,
    hd: usize,
) -> Result<Var> {
    let x = tape.reshape(x, &[b, l, h, hd])?;
    tape.permute(x, &[0, 2, 1, 3])
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        dim: usize,
        hidden_mult: usize,
    ) -> Result<Self> {
        if hidden_mult == 0 {
            return Err(Error::Config("ffn hidden_mult must be positive".into()));
        }
        Ok(Self {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), dim, hidden_mult * dim)?,
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden_mult * dim, dim)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, reg, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, reg, h)
    }
}

/// Checks every parameter gradient of `f` against central differences.
///
/// At most `max_elems` evenly spaced elements of each tensor are perturbed.
/// Returns `(name, worst relative error)` in registry order.
pub fn check_param_grads(
    reg: &ParamRegistry<f64>,
    max_elems: usize,
    f: impl Fn(&mut Tape<f64>, &ParamRegistry<f64>) -> Result<Var>,
) -> Result<Vec<(String, f64)>> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, reg)?;
    let floor = gradcheck::noise_floor(tape.scalar(loss));
    let bound: Vec<(String, Var)> = tape.params().to_vec();
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    let mut probe_reg = reg.clone();
    for (name, p) in reg.iter() {
        let n = p.tensor.numel();
        let analytic = match bound.iter().find(|(k, _)| k == name) {
            Some((_, v)) => grads.get_or_zeros(*v, n),
            None => vec![0.0; n],
        };
        let picks = gradcheck::sample_indices(n, max_elems);
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = p.tensor.data()[i];
            let single = Tensor::from_f64(&[1], &[orig])?;
            let g = finite_diff_grad(
                |x: &Tensor<f64>| {
                    probe_reg.get_mut(name).expect("declared").data_mut()[i] = x.data()[0];
                    let mut t = Tape::new();
                    let l = f(&mut t, &probe_reg).expect("forward succeeded once");
                    t.scalar(l)
                },
                &single,
                gradcheck::DEFAULT_STEP,
            );
            probe_reg.get_mut(name)?.data_mut()[i] = orig;
            a.push(analytic[i]);
            num.push(g.data()[0]);
        }
        out.push((name.to_string(), max_relative_error(&a, &num, floor)));
    }
    Ok(out)
}
