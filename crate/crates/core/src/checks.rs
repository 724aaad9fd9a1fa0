//! Finite-difference gradient checks over every module, 64-bit.

use crate::data::{generate_dataset, DataConfig, TaskBatch};
use crate::decoder::{Decoder, TaskTokenSet};
use crate::encoder::{EncoderInterface, MlpFusion, ToyEncoder};
use crate::error::Result;
use crate::heads::{expected_value, Selection, UnifiedHead};
use crate::losses::{self, LossConfig, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::nn::{
    check_param_grads, init_params, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamRegistry,
};
use crate::rng::Rng;
use crate::task::Task;
use crate::tensor::gradcheck::check_tape_fn_sampled;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::joint_objective;

/// Relative error bound every check must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn rand(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(
        shape,
        &(0..n).map(|_| rng.range(lo, hi)).collect::<Vec<_>>(),
    )
    .expect("sized")
    .with_grad()
}

/// Values in `[lo, hi]` kept at least `gap` away from zero, so kinks at the
/// origin never fall inside a difference stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor<f64> {
    let mut t = rand(rng, shape, lo, hi);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// `sum(x * r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient is dense.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let r = tape.constant_f64(
        &shape,
        &(0..n).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>(),
    )?;
    let p = tape.mul(x, r)?;
    tape.sum(p, None)
}

fn worst(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn elementwise() -> Result<f64> {
    let mut rng = Rng::new(11);
    let a = away_from_zero(&mut rng, &[3, 4], -2.0, 2.0, 0.05);
    let b = rand(&mut rng, &[4], 0.5, 2.0);
    let c = rand(&mut rng, &[3, 4], -0.9, 0.9);
    Ok(worst(check_tape_fn_sampled(
        &[a, b, c],
        usize::MAX,
        |t, v| {
            let (a, b, c) = (v[0], v[1], v[2]);
            let mut terms = Vec::new();
            let s = t.add(a, b)?;
            terms.push(t.sub(s, c)?);
            let m = t.mul(a, c)?;
            terms.push(t.div(m, b)?);
            let n = t.neg(a)?;
            terms.push(t.scale(n, 0.7)?);
            terms.push(t.add_scalar(c, 0.3)?);
            terms.push(t.exp(c)?);
            let lb = t.log(b)?;
            terms.push(t.sqrt(b)?);
            terms.push(lb);
            terms.push(t.square(a)?);
            terms.push(t.relu(a)?);
            terms.push(t.gelu(a)?);
            terms.push(t.sigmoid(a)?);
            terms.push(t.softplus(a)?);
            terms.push(t.abs(a)?);
            terms.push(t.acos(c, 1e-7)?);
            terms.push(t.cos(a)?);
            terms.push(t.smooth_l1(a, 0.5)?);
            terms.push(t.clamp(a, -1.0, 1.0)?);
            let mut acc = project(t, terms[0], 1)?;
            for (i, &x) in terms.iter().enumerate().skip(1) {
                let p = project(t, x, i as u64 + 1)?;
                acc = t.add(acc, p)?;
            }
            Ok(acc)
        },
    )?))
}

fn shaping() -> Result<f64> {
    let mut rng = Rng::new(12);
    let a = rand(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand(&mut rng, &[4, 5], -1.0, 1.0);
    let r = rand(&mut rng, &[3], -1.0, 1.0);
    Ok(worst(check_tape_fn_sampled(
        &[a, w, r],
        usize::MAX,
        |t, v| {
            let mm = t.matmul(v[0], v[1])?;
            let tr = t.transpose(mm)?;
            let pm = t.permute(tr, &[2, 0, 1])?;
            let rs = t.reshape(pm, &[6, 5])?;
            let r3 = t.reshape(v[2], &[3, 1])?;
            let bc = t.broadcast_to(r3, &[3, 5])?;
            let cat = t.concat(&[rs, bc], 0)?;
            let nr = t.narrow(cat, 0, 2, 6)?;
            let sel = t.index_select(nr, &[5, 0, 0, 3])?;
            let g = t.gather_last(sel, &[4, 1, 0, 2])?;
            let p1 = project(t, nr, 3)?;
            let p2 = project(t, g, 4)?;
            t.add(p1, p2)
        },
    )?))
}

fn normalization() -> Result<f64> {
    let mut rng = Rng::new(13);
    let x = rand(&mut rng, &[2, 3, 6], -2.0, 2.0);
    let g = rand(&mut rng, &[6], 0.5, 1.5);
    let b = rand(&mut rng, &[6], -0.5, 0.5);
    Ok(worst(check_tape_fn_sampled(
        &[x, g, b],
        usize::MAX,
        |t, v| {
            let outs = [
                t.softmax(v[0], -1)?,
                t.softmax_scaled(v[0], 1, 0.4)?,
                t.log_softmax(v[0], 0)?,
                t.layer_norm(v[0], v[1], v[2], 1e-5)?,
                t.l2_normalize(v[0], 1e-12)?,
            ];
            let mut acc = project(t, outs[0], 20)?;
            for (i, &o) in outs.iter().enumerate().skip(1) {
                let p = project(t, o, 20 + i as u64)?;
                acc = t.add(acc, p)?;
            }
            Ok(acc)
        },
    )?))
}

fn reductions() -> Result<f64> {
    let mut rng = Rng::new(14);
    let x = rand(&mut rng, &[3, 4, 5], -1.0, 1.0);
    Ok(worst(check_tape_fn_sampled(&[x], usize::MAX, |t, v| {
        let s = t.sum(v[0], Some(1))?;
        let m = t.mean(v[0], Some(-1))?;
        let x = t.max(v[0], Some(0))?;
        let all = t.mean(v[0], None)?;
        let a = project(t, s, 30)?;
        let b = project(t, m, 31)?;
        let c = project(t, x, 32)?;
        let ab = t.add(a, b)?;
        let abc = t.add(ab, c)?;
        t.add(abc, all)
    })?))
}

fn spatial() -> Result<f64> {
    let mut rng = Rng::new(15);
    let x = rand(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let w = rand(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    Ok(worst(check_tape_fn_sampled(
        &[x, w],
        usize::MAX,
        |t, v| {
            let c = t.conv2d(v[0], v[1], 2, 1)?;
            let up = t.bilinear_resize(c, 5, 7)?;
            let down = t.bilinear_resize(v[0], 4, 3)?;
            let a = project(t, up, 40)?;
            let b = project(t, down, 41)?;
            t.add(a, b)
        },
    )?))
}

fn so3() -> Result<f64> {
    let mut rng = Rng::new(16);
    let m = rand(&mut rng, &[4, 3, 3], -1.0, 1.0);
    Ok(worst(check_tape_fn_sampled(&[m], usize::MAX, |t, v| {
        let r = t.so3_project(v[0])?;
        project(t, r, 50)
    })?))
}

fn params_and_inputs(
    reg: &ParamRegistry<f64>,
    inputs: &[Tensor<f64>],
    max_elems: usize,
    f: impl Fn(&mut Tape<f64>, &ParamRegistry<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let p = check_param_grads(reg, max_elems, |t, reg| {
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        f(t, reg, &vs)
    })?;
    let i = check_tape_fn_sampled(inputs, max_elems, |t, vs| f(t, reg, vs))?;
    Ok(worst(p.into_iter().map(|(_, w)| w).chain(i)))
}

fn blocks(cfg: &ModelConfig) -> Result<f64> {
    let mut reg = ParamRegistry::new();
    let d = cfg.d_t;
    let lin = Linear::new(&mut reg, "lin", d, 3)?;
    let ln = LayerNorm::new(&mut reg, "ln", d)?;
    let mha = MultiHeadAttention::new(&mut reg, "mha", cfg.attention()?)?;
    let ffn = FeedForward::new(&mut reg, "ffn", d, cfg.ffn_mult)?;
    init_params(&mut reg, &mut Rng::new(17));
    let mut rng = Rng::new(18);
    let q = rand(&mut rng, &[2, 3, d], -1.0, 1.0);
    let kv = rand(&mut rng, &[2, 5, d], -1.0, 1.0);
    params_and_inputs(&reg, &[q, kv], 16, |t, reg, v| {
        let n = ln.forward(t, reg, v[0])?;
        let a = mha.forward(t, reg, n, v[1])?;
        let f = ffn.forward(t, reg, a)?;
        let o = lin.forward(t, reg, f)?;
        project(t, o, 60)
    })
}

fn encoder_fusion(cfg: &ModelConfig) -> Result<f64> {
    let mut reg = ParamRegistry::new();
    let enc = ToyEncoder::new(&mut reg, "encoder", cfg.encoder_channels)?;
    let fusion = MlpFusion::new(&mut reg, "fusion", enc.channels(), cfg.d_t)?;
    init_params(&mut reg, &mut Rng::new(19));
    let px = rand(
        &mut Rng::new(20),
        &[1, 3, cfg.image_height, cfg.image_width],
        0.0,
        1.0,
    );
    params_and_inputs(&reg, &[px], 8, |t, reg, v| {
        let scales = enc.forward(t, reg, v[0])?;
        let f = fusion.forward(t, reg, &scales)?;
        project(t, f, 61)
    })
}

fn decoder(cfg: &ModelConfig) -> Result<f64> {
    let mut reg = ParamRegistry::new();
    let tokens = TaskTokenSet::new(&mut reg, "tokens", cfg.head.c_seg, cfg.d_t)?;
    let dec = Decoder::new(&mut reg, "decoder", cfg.decoder()?, cfg.ablation)?;
    init_params(&mut reg, &mut Rng::new(21));
    let face = rand(&mut Rng::new(22), &[1, 6, cfg.d_t], -1.0, 1.0);
    params_and_inputs(&reg, &[face], 8, |t, reg, v| {
        let s = dec.forward(t, reg, v[0], &tokens)?;
        let a = project(t, s.task_tokens, 62)?;
        let b = project(t, s.face_tokens, 63)?;
        t.add(a, b)
    })
}

fn heads(cfg: &ModelConfig) -> Result<f64> {
    let mut reg = ParamRegistry::new();
    let tokens = TaskTokenSet::new(&mut reg, "tokens", cfg.head.c_seg, cfg.d_t)?;
    let head = UnifiedHead::new(&mut reg, "head", cfg.head, cfg.attention()?, cfg.ablation)?;
    init_params(&mut reg, &mut Rng::new(23));
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut rng = Rng::new(24);
    let task = rand(&mut rng, &[2, tokens.total(), cfg.d_t], -1.0, 1.0);
    let face = rand(&mut rng, &[2, (h / 4) * (w / 4), cfg.d_t], -1.0, 1.0);
    let sel = Selection::all(2, &Task::ALL);
    params_and_inputs(&reg, &[task, face], 8, |t, reg, v| {
        let refined = head.refine(t, reg, v[0], v[1])?;
        let p = head.forward(t, reg, &tokens, refined, v[1], (h, w), &sel)?;
        let outs = p.outputs();
        let mut acc = project(t, outs[0], 70)?;
        for (i, &o) in outs.iter().enumerate().skip(1) {
            let q = project(t, o, 70 + i as u64)?;
            acc = t.add(acc, q)?;
        }
        Ok(acc)
    })
}

fn losses_check(cfg: &ModelConfig) -> Result<f64> {
    let mut rng = Rng::new(25);
    let lc = LossConfig::default();
    let hc = cfg.head;
    let target: Vec<usize> = (0..2 * 16).map(|i| i % hc.c_seg).collect();
    let gt: Vec<f64> = (0..2 * 68 * 2).map(|_| rng.uniform()).collect();
    let bits: Vec<f64> = (0..2 * 5).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let rot: Vec<f64> = crate::data::rotation_from_euler(20.0, -10.0, 5.0).to_vec();
    let inputs = [
        rand(&mut rng, &[2, hc.c_seg, 4, 4], -1.0, 1.0),
        rand(&mut rng, &[2, 68, 2], 0.0, 1.0),
        rand(&mut rng, &[1, 3, 3], -1.0, 1.0),
        rand(&mut rng, &[2, 5], -2.0, 2.0),
        rand(&mut rng, &[2, hc.age_bins], -1.0, 1.0),
        rand(&mut rng, &[2, 3], -1.0, 1.0),
        rand(&mut rng, &[2, 4], -1.0, 1.0),
        rand(&mut rng, &[3, 4], -1.0, 1.0),
    ];
    Ok(worst(check_tape_fn_sampled(
        &inputs,
        usize::MAX,
        |t, v| {
            let mut terms = vec![
                losses::seg_loss(t, v[0], &target, lc.dice_smooth)?,
                losses::landmark_loss(t, v[1], &gt, 0.3)?,
            ];
            let r = t.so3_project(v[2])?;
            let g = t.constant_f64(&[1, 3, 3], &rot)?;
            terms.push(losses::geodesic_loss(t, r, g)?);
            terms.push(losses::bce_multilabel_loss(t, v[3], &bits)?);
            let centers: Vec<f64> = (0..hc.age_bins).map(|i| hc.age_bin_center(i)).collect();
            let e = expected_value(t, v[4], &centers)?;
            terms.push(losses::age_loss(t, v[4], e, &[23.0, 61.0], &hc)?);
            terms.push(losses::ce_loss(t, v[5], &[2, 0])?);
            let emb = t.l2_normalize(v[6], 1e-12)?;
            let wn = t.l2_normalize(v[7], 1e-12)?;
            terms.push(losses::margin_softmax_loss(
                t,
                emb,
                &[1, 2],
                wn,
                lc.arcface_margin,
                lc.arcface_scale,
            )?);
            let pairs: Vec<(Task, Var)> = Task::ALL.iter().copied().zip(terms).collect();
            Ok(losses::joint_loss(t, &pairs, &LossWeights::default())?.0)
        },
    )?))
}

/// The full network and joint loss with every task present, checked against
/// both parameters and pixels.
fn full_model(cfg: &ModelConfig) -> Result<f64> {
    let mut reg = ParamRegistry::new();
    let model = Model::new(&mut reg, *cfg)?;
    init_params(&mut reg, &mut Rng::new(26));
    let dcfg = DataConfig {
        image_height: cfg.image_height,
        image_width: cfg.image_width,
        head: cfg.head,
    };
    let datasets = Task::ALL
        .iter()
        .map(|&t| generate_dataset(t, 2, 27, &dcfg))
        .collect::<Result<Vec<_>>>()?;
    let picks: Vec<(Task, usize)> = Task::ALL.iter().map(|&t| (t, 1)).collect();
    let batch = TaskBatch::collect(&datasets, &picks)?;
    let px = batch.images.cast::<f64>().with_grad();
    let lc = LossConfig::default();
    let w = LossWeights::default();
    params_and_inputs(&reg, &[px], 4, |t, reg, v| {
        Ok(joint_objective(t, reg, &model, v[0], &batch, &lc, &w)?.0)
    })
}

/// Runs every check at the geometry of `cfg` (use [`ModelConfig::toy`]).
pub fn run_suite(cfg: &ModelConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |module, worst: Result<f64>| -> Result<()> {
        out.push(CheckResult {
            module,
            worst: worst?,
        });
        Ok(())
    };
    push("tensor.elementwise", elementwise())?;
    push("tensor.shaping", shaping())?;
    push("tensor.normalization", normalization())?;
    push("tensor.reduction", reductions())?;
    push("tensor.spatial", spatial())?;
    push("tensor.so3", so3())?;
    push("nn.blocks", blocks(cfg))?;
    push("encoder.fusion", encoder_fusion(cfg))?;
    push("decoder", decoder(cfg))?;
    push("heads", heads(cfg))?;
    push("losses", losses_check(cfg))?;
    push("model.joint", full_model(cfg))?;
    Ok(out)
}
