//! Per-task losses and the weighted joint objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::task::Task;
use crate::tensor::{Real, Tape, Var};

/// Half-width kept away from ±1 when differentiating arccos.
pub const ACOS_EPS: f64 = 1e-7;
/// Tolerance of the input checks made on 64-bit tapes.
const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub lnd: f64,
    pub hpe: f64,
    pub attr: f64,
    pub age: f64,
    pub gender_race: f64,
    pub exp: f64,
    pub fr: f64,
    pub vis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            lnd: 1.0,
            hpe: 1.0,
            attr: 1.0,
            age: 1.0,
            gender_race: 1.0,
            exp: 1.0,
            fr: 1.0,
            vis: 1.0,
        }
    }
}

impl LossWeights {
    fn all(&self) -> [f64; 9] {
        [
            self.seg,
            self.lnd,
            self.hpe,
            self.attr,
            self.age,
            self.gender_race,
            self.exp,
            self.fr,
            self.vis,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.all();
        if w.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|&l| l == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Gender and race share one weight.
    pub fn for_task(&self, task: Task) -> f64 {
        match task {
            Task::Parsing => self.seg,
            Task::Landmarks => self.lnd,
            Task::HeadPose => self.hpe,
            Task::Attributes => self.attr,
            Task::Age => self.age,
            Task::Gender | Task::Race => self.gender_race,
            Task::Expression => self.exp,
            Task::Recognition => self.fr,
            Task::Visibility => self.vis,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub landmark_beta: f64,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: 1.0,
            landmark_beta: 1.0,
            arcface_margin: 0.3,
            arcface_scale: 16.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth >= 0.0
            && self.landmark_beta > 0.0
            && self.arcface_margin >= 0.0
            && self.arcface_scale > 0.0)
        {
            return Err(Error::Config(format!("invalid loss settings {self:?}")));
        }
        Ok(())
    }
}

/// Task losses present in one step and their weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub per_task: BTreeMap<Task, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, task: Task) -> Option<f64> {
        self.per_task.get(&task).copied()
    }
}

fn one_hot(labels: &[usize], classes: usize, op: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!(
                "{op}: class {l} out of range for {classes} classes"
            )));
        }
        out[i * classes + l] = 1.0;
    }
    Ok(out)
}

fn strict<T: Real>(tape: &Tape<T>) -> bool {
    T::STRICT && tape.strict
}

/// `1 - mean_c (2 Σ p·y + s) / (Σ p + Σ y + s)` for `probs`, `target` of shape
/// `[B, C, N]`; sums run over batch and positions.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: Var, smooth: f64) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 3 || tape.shape(target) != s.as_slice() {
        return Err(Error::shape("dice_loss", &s, tape.shape(target)));
    }
    let class_sum = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let per = tape.sum(x, Some(2))?;
        tape.sum(per, Some(0))
    };
    let inter = tape.mul(probs, target)?;
    let inter = class_sum(tape, inter)?;
    let ps = class_sum(tape, probs)?;
    let ys = class_sum(tape, target)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, smooth)?;
    let den = tape.add(ps, ys)?;
    let den = tape.add_scalar(den, smooth)?;
    let dice = tape.div(num, den)?;
    let m = tape.mean(dice, None)?;
    let neg = tape.neg(m)?;
    tape.add_scalar(neg, 1.0)
}

/// `-mean_r log_softmax(logits)[r, label_r]` for `[R, K]` logits.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("ce_loss", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::invalid(format!(
            "ce_loss: label {bad} out of range for {} classes",
            s[1]
        )));
    }
    let lp = tape.log_softmax(logits, -1)?;
    let picked = tape.gather_last(lp, labels)?;
    let m = tape.mean(picked, None)?;
    tape.neg(m)
}

/// `0.5 * dice + 0.5 * pixel CE` for logits `[B, C, H, W]` and a class map
/// `[B, H, W]` in row-major order.
pub fn seg_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[usize],
    smooth: f64,
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || target.len() != s[0] * s[2] * s[3] {
        return Err(Error::shape("seg_loss", &s, &[target.len()]));
    }
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let mut y = vec![0.0; b * c * n];
    for bi in 0..b {
        for p in 0..n {
            let cls = target[bi * n + p];
            if cls >= c {
                return Err(Error::invalid(format!(
                    "seg_loss: class {cls} out of range for {c} classes"
                )));
            }
            y[(bi * c + cls) * n + p] = 1.0;
        }
    }
    let flat = tape.reshape(logits, &[b, c, n])?;
    let yv = tape.constant_f64(&[b, c, n], &y)?;
    let probs = tape.softmax(flat, 1)?;
    let dice = dice_loss(tape, probs, yv, smooth)?;
    let lp = tape.log_softmax(flat, 1)?;
    let picked = tape.mul(lp, yv)?;
    let ce = tape.sum(picked, None)?;
    let ce = tape.scale(ce, -1.0 / (b * n) as f64)?;
    let total = tape.add(dice, ce)?;
    tape.scale(total, 0.5)
}

/// Smooth-L1 over coordinates, summed over `(x, y)` and averaged over
/// landmarks and batch.
pub fn landmark_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[f64], beta: f64) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[2] != 2 || gt.len() != s.iter().product::<usize>() {
        return Err(Error::shape("landmark_loss", &s, &[gt.len()]));
    }
    let g = tape.constant_f64(&s, gt)?;
    let d = tape.sub(pred, g)?;
    let l = tape.smooth_l1(d, beta)?;
    let total = tape.sum(l, None)?;
    tape.scale(total, 1.0 / (s[0] * s[1]) as f64)
}

fn check_rotations(op: &'static str, r: &[f64]) -> Result<()> {
    for m in r.chunks(9) {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k * 3 + i] * m[k * 3 + j]).sum();
                if (dot - if i == j { 1.0 } else { 0.0 }).abs() > CHECK_TOL {
                    return Err(Error::Domain {
                        op,
                        detail: format!("input is not orthonormal: {m:?}"),
                    });
                }
            }
        }
        let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6]);
        if (det - 1.0).abs() > CHECK_TOL {
            return Err(Error::Domain {
                op,
                detail: format!("determinant {det} is not +1"),
            });
        }
    }
    Ok(())
}

/// Mean rotation angle between `pred` and `gt`, both `[B, 3, 3]`.
pub fn geodesic_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[1..] != [3, 3] || tape.shape(gt) != s.as_slice() {
        return Err(Error::shape("geodesic_loss", &s, tape.shape(gt)));
    }
    if strict(tape) {
        for v in [pred, gt] {
            let vals: Vec<f64> = tape.value(v).iter().map(|x| x.as_f64()).collect();
            check_rotations("geodesic_loss", &vals)?;
        }
    }
    let b = s[0];
    let p = tape.reshape(pred, &[b, 9])?;
    let g = tape.reshape(gt, &[b, 9])?;
    let prod = tape.mul(p, g)?;
    let tr = tape.sum(prod, Some(1))?;
    let c = tape.add_scalar(tr, -1.0)?;
    let c = tape.scale(c, 0.5)?;
    let angle = tape.acos(c, ACOS_EPS)?;
    tape.mean(angle, None)
}

/// Additive angular margin softmax: CE over `s·cos(θ_y + m)` for the true
/// class and `s·cos θ_j` otherwise, with unit-norm embeddings `[B, D]` and
/// class weights `[N, D]`.
pub fn margin_softmax_loss<T: Real>(
    tape: &mut Tape<T>,
    emb: Var,
    labels: &[usize],
    weights: Var,
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let se = tape.shape(emb).to_vec();
    let sw = tape.shape(weights).to_vec();
    if se.len() != 2 || sw.len() != 2 || se[1] != sw[1] || se[0] != labels.len() {
        return Err(Error::shape("margin_softmax_loss", &se, &sw));
    }
    if strict(tape) {
        for v in [emb, weights] {
            let d = tape.shape(v)[1];
            if let Some(r) = tape.value(v).chunks(d).find(|r| {
                (r.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt() - 1.0).abs() > CHECK_TOL
            }) {
                return Err(Error::Domain {
                    op: "margin_softmax_loss",
                    detail: format!("row {r:?} is not unit norm"),
                });
            }
        }
    }
    let n = sw[0];
    let y = one_hot(labels, n, "margin_softmax_loss")?;
    let wt = tape.transpose(weights)?;
    let cos = tape.matmul(emb, wt)?;
    let cy = tape.gather_last(cos, labels)?;
    let theta = tape.acos(cy, ACOS_EPS)?;
    let shifted = tape.add_scalar(theta, margin)?;
    let cm = tape.cos(shifted)?;
    let delta = tape.sub(cm, cy)?;
    let delta = tape.reshape(delta, &[labels.len(), 1])?;
    let yv = tape.constant_f64(&[labels.len(), n], &y)?;
    let bump = tape.mul(yv, delta)?;
    let logits = tape.add(cos, bump)?;
    let logits = tape.scale(logits, scale)?;
    ce_loss(tape, logits, labels)
}

/// Mean of `softplus(x) - x·y` over all entries.
pub fn bce_multilabel_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[f64],
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if targets.len() != tape.value(logits).len() {
        return Err(Error::shape("bce_multilabel_loss", &s, &[targets.len()]));
    }
    if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!(
            "bce_multilabel_loss: target {bad} is not binary"
        )));
    }
    let y = tape.constant_f64(&s, targets)?;
    let sp = tape.softplus(logits)?;
    let xy = tape.mul(logits, y)?;
    let l = tape.sub(sp, xy)?;
    tape.mean(l, None)
}

/// `0.5 * CE(bins, bin(gt)) + 0.5 * mean |expected - gt| / max_age`.
pub fn age_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    expected: Var,
    gt: &[f64],
    cfg: &HeadConfig,
) -> Result<Var> {
    let bins = gt
        .iter()
        .map(|&a| {
            cfg.age_bin(a).ok_or_else(|| {
                Error::invalid(format!("age_loss: age {a} outside [0, {})", cfg.max_age))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tape.shape(expected) != [gt.len()] {
        return Err(Error::shape("age_loss", tape.shape(expected), &[gt.len()]));
    }
    let ce = ce_loss(tape, logits, &bins)?;
    let g = tape.constant_f64(&[gt.len()], gt)?;
    let d = tape.sub(expected, g)?;
    let d = tape.abs(d)?;
    let l1 = tape.mean(d, None)?;
    let l1 = tape.scale(l1, 1.0 / cfg.max_age)?;
    let total = tape.add(ce, l1)?;
    tape.scale(total, 0.5)
}

/// `Σ λ_t L_t` over the present tasks.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    terms: &[(Task, Var)],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    if terms.is_empty() {
        return Err(Error::invalid("joint_loss: no task losses present"));
    }
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for &(task, l) in terms {
        if tape.value(l).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(l).to_vec()));
        }
        if report
            .per_task
            .insert(task, tape.scalar(l).as_f64())
            .is_some()
        {
            return Err(Error::invalid(format!(
                "joint_loss: task {task} given twice"
            )));
        }
        let w = tape.scale(l, weights.for_task(task))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, w)?,
            None => w,
        });
    }
    let total = total.expect("non-empty");
    report.total = tape.scalar(total).as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::check_tape_fn;
    use crate::tensor::Tensor;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn rot_z(a: f64) -> [f64; 9] {
        [a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]
    }

    fn rot_axis(axis: [f64; 3], angle: f64) -> [f64; 9] {
        let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [x, y, z] = axis.map(|v| v / n);
        let (c, s, v) = (angle.cos(), angle.sin(), 1.0 - angle.cos());
        [
            x * x * v + c,
            x * y * v - z * s,
            x * z * v + y * s,
            y * x * v + z * s,
            y * y * v + c,
            y * z * v - x * s,
            z * x * v - y * s,
            z * y * v + x * s,
            z * z * v + c,
        ]
    }

    fn matmul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
        std::array::from_fn(|k| (0..3).map(|p| a[(k / 3) * 3 + p] * b[p * 3 + k % 3]).sum())
    }

    fn transpose3(a: &[f64; 9]) -> [f64; 9] {
        std::array::from_fn(|k| a[(k % 3) * 3 + k / 3])
    }

    /// Rotation angle from the axis-angle form of `R`: `|ω|` where
    /// `sin θ · axis = vee(R - Rᵀ) / 2` and `cos θ` from the trace.
    fn axis_angle(r: &[f64; 9]) -> f64 {
        let w = [
            (r[7] - r[5]) / 2.0,
            (r[2] - r[6]) / 2.0,
            (r[3] - r[1]) / 2.0,
        ];
        let s = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = (r[0] + r[4] + r[8] - 1.0) / 2.0;
        s.atan2(c)
    }

    fn geodesic(a: &[f64; 9], b: &[f64; 9]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3, 3], a));
        let y = tape.leaf(t(&[1, 3, 3], b));
        let l = geodesic_loss(&mut tape, x, y).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn seg_loss_examples() {
        let target = [0usize, 2, 1, 1, 3, 0, 2, 2];
        let mut logits = vec![0.0; 2 * 4 * 4];
        for (i, &c) in target.iter().enumerate() {
            let (b, p) = (i / 4, i % 4);
            logits[(b * 4 + c) * 4 + p] = 60.0;
        }
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t(&[2, 4, 2, 2], &logits));
        let loss = seg_loss(&mut tape, l, &target, 1.0).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-6);

        let u = tape.leaf(Tensor::zeros(&[2, 4, 2, 2]));
        let lp = tape.reshape(u, &[2, 4, 4]).unwrap();
        let lp = tape.log_softmax(lp, 1).unwrap();
        let ce = -tape.value(lp)[0];
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!(seg_loss(&mut tape, u, &[4, 0, 0, 0, 0, 0, 0, 0], 1.0).is_err());
    }

    #[test]
    fn hard_dice_hand_case() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.leaf(t(&[1, 1, 2], &[1.0, 0.0]));
        let d = dice_loss(&mut tape, p, y, 0.0).unwrap();
        assert!((tape.scalar(d) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn landmark_loss_examples() {
        let mut rng = Rng::new(1);
        let gt: Vec<f64> = (0..2 * 68 * 2).map(|_| rng.uniform()).collect();
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[2, 68, 2], &gt));
        let l = landmark_loss(&mut tape, p, &gt, 1.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let shifted: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 0.5 } else { *v })
            .collect();
        let p = tape.leaf(t(&[2, 68, 2], &shifted));
        let l = landmark_loss(&mut tape, p, &gt, 1.0).unwrap();
        assert!((tape.scalar(l) - 0.125).abs() < 1e-12);
        let g = tape.leaf(t(&[2, 68, 2], &gt));
        let l2 = landmark_loss(&mut tape, g, &shifted, 1.0).unwrap();
        assert_eq!(tape.scalar(l), tape.scalar(l2));
    }

    #[test]
    fn geodesic_examples() {
        let i = rot_z(0.0);
        assert!(geodesic(&i, &i).abs() < 1e-6);
        assert!((geodesic(&i, &rot_z(FRAC_PI_2)) - FRAC_PI_2).abs() < 1e-6);
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let a = rot_axis(
                [rng.normal(), rng.normal(), rng.normal()],
                rng.range(0.0, 3.1),
            );
            let b = rot_axis(
                [rng.normal(), rng.normal(), rng.normal()],
                rng.range(0.0, 3.1),
            );
            let rel = matmul3(&transpose3(&a), &b);
            assert!((geodesic(&a, &b) - axis_angle(&rel)).abs() < 1e-6);
            assert!((geodesic(&a, &b) - geodesic(&b, &a)).abs() < 1e-9);
        }
        let mut tape = Tape::<f64>::new();
        let bad = tape.leaf(t(
            &[1, 3, 3],
            &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let ok = tape.leaf(t(&[1, 3, 3], &i));
        assert!(matches!(
            geodesic_loss(&mut tape, bad, ok),
            Err(Error::Domain { .. })
        ));
    }

    fn margin_loss(emb: &[f64], labels: &[usize], w: &[f64], m: f64, s: f64) -> f64 {
        let d = 2;
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(t(&[labels.len(), d], emb));
        let wv = tape.leaf(t(&[w.len() / d, d], w));
        let l = margin_softmax_loss(&mut tape, e, labels, wv, m, s).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn margin_softmax_examples() {
        // classes at angles 0, 2π/3, 4π/3; embedding at angle 0.4
        let w: Vec<f64> = (0..3)
            .flat_map(|k| {
                let a = k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                [a.cos(), a.sin()]
            })
            .collect();
        let emb = [0.4f64.cos(), 0.4f64.sin()];
        let cosines: Vec<f64> = (0..3)
            .map(|k| (0.4 - k as f64 * 2.0 * std::f64::consts::PI / 3.0).cos())
            .collect();
        let plain = {
            let z: f64 = cosines.iter().map(|c| c.exp()).sum();
            -(cosines[0].exp() / z).ln()
        };
        assert!((margin_loss(&emb, &[0], &w, 0.0, 1.0) - plain).abs() < 1e-12);

        let (m, s) = (0.5, 4.0);
        let logits = [s * (0.4f64 + m).cos(), s * cosines[1], s * cosines[2]];
        let z: f64 = logits.iter().map(|c| c.exp()).sum();
        let want = -(logits[0].exp() / z).ln();
        let got = margin_loss(&emb, &[0], &w, m, s);
        assert!((got - want).abs() < 1e-12);
        assert!(got > margin_loss(&emb, &[0], &w, 0.0, s));

        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(t(&[1, 2], &[2.0, 0.0]));
        let wv = tape.leaf(t(&[3, 2], &w));
        assert!(matches!(
            margin_softmax_loss(&mut tape, e, &[0], wv, 0.3, 16.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let l = bce_multilabel_loss(&mut tape, x, &[1.0]).unwrap();
        assert!((tape.scalar(l) - LN_2).abs() < 1e-12);
        let x = tape.leaf(t(&[1], &[20.0]));
        let l = bce_multilabel_loss(&mut tape, x, &[1.0]).unwrap();
        assert!(tape.scalar(l) < 1e-8 && tape.scalar(l) >= 0.0);
        let xs = [1.5, -0.3, 2.0, -4.0];
        let ys = [1.0, 0.0, 0.0, 1.0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, y)| -(y * sig(x).ln() + (1.0 - y) * (1.0 - sig(x)).ln()))
            .sum::<f64>()
            / 4.0;
        let x = tape.leaf(t(&[2, 2], &xs));
        let l = bce_multilabel_loss(&mut tape, x, &ys).unwrap();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
        assert!(bce_multilabel_loss(&mut tape, x, &[0.5, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn age_examples() {
        let cfg = HeadConfig::default();
        let centers: Vec<f64> = (0..8).map(|i| cfg.age_bin_center(i)).collect();
        let run = |cfg: &HeadConfig, logits: &[f64], gt: &[f64]| -> Result<f64> {
            let mut tape = Tape::<f64>::new();
            let n = cfg.age_bins;
            let l = tape.leaf(t(&[gt.len(), n], logits));
            let centers: Vec<f64> = (0..n).map(|i| cfg.age_bin_center(i)).collect();
            let e = crate::heads::expected_value(&mut tape, l, &centers)?;
            let loss = age_loss(&mut tape, l, e, gt, cfg)?;
            Ok(tape.scalar(loss))
        };
        let mut perfect = vec![-100.0; 8];
        perfect[3] = 100.0;
        assert!(run(&cfg, &perfect, &[centers[3]]).unwrap().abs() < 1e-6);
        // uniform logits, gt at the mean of the centers: CE = ln 8, L1 = 0
        assert!((run(&cfg, &[0.0; 8], &[40.0]).unwrap() - 0.5 * 8f64.ln()).abs() < 1e-12);
        assert!(run(&cfg, &[0.0; 8], &[80.0]).is_err());

        // two bins over [0, 80): logits (0, ln 3) → p = (1/4, 3/4), E = 20/4 + 3*60/4 = 50
        let two = HeadConfig {
            age_bins: 2,
            ..HeadConfig::default()
        };
        let got = run(&two, &[0.0, 3f64.ln()], &[30.0]).unwrap();
        let want = 0.5 * -(0.25f64.ln()) + 0.5 * (50.0 - 30.0) / 80.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3], &[1e4, 0.0, 0.0]));
        let l = ce_loss(&mut tape, x, &[0]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        let u = tape.leaf(Tensor::zeros(&[2, 5]));
        let l = ce_loss(&mut tape, u, &[1, 4]).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);
        let h = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = ce_loss(&mut tape, h, &[1]).unwrap();
        let want = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
        assert!(ce_loss(&mut tape, h, &[3]).is_err());
    }

    #[test]
    fn joint_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[], &[1.0]));
        let b = tape.leaf(t(&[], &[1.0]));
        let w = LossWeights::default();
        let (total, report) = joint_loss(&mut tape, &[(Task::Age, a)], &w).unwrap();
        assert_eq!(tape.scalar(total), 1.0);
        assert_eq!(report.get(Task::Age), Some(1.0));
        assert_eq!(report.get(Task::Gender), None);
        let w2 = LossWeights {
            seg: 2.0,
            lnd: 3.0,
            ..LossWeights::default()
        };
        let (total, report) =
            joint_loss(&mut tape, &[(Task::Parsing, a), (Task::Landmarks, b)], &w2).unwrap();
        assert_eq!(tape.scalar(total), 5.0);
        assert_eq!(report.total, 5.0);
        assert!(joint_loss(&mut tape, &[], &w).is_err());
        assert!(LossWeights { seg: -1.0, ..w }.validate().is_err());
        let zero = LossWeights {
            seg: 0.0,
            lnd: 0.0,
            hpe: 0.0,
            attr: 0.0,
            age: 0.0,
            gender_race: 0.0,
            exp: 0.0,
            fr: 0.0,
            vis: 0.0,
        };
        assert!(zero.validate().is_err());
        assert_eq!(w.for_task(Task::Gender), w.for_task(Task::Race));
    }

    #[test]
    fn joint_sums_nine_terms_and_is_linear_in_each_weight() {
        let tasks = [
            Task::Parsing,
            Task::Landmarks,
            Task::HeadPose,
            Task::Attributes,
            Task::Age,
            Task::Gender,
            Task::Expression,
            Task::Recognition,
            Task::Visibility,
        ];
        let vals = [0.31, 1.7, 0.02, 0.69, 2.2, 0.5, 1.1, 9.3, 0.05];
        let mut tape = Tape::<f64>::new();
        let terms: Vec<(Task, Var)> = tasks
            .iter()
            .zip(vals)
            .map(|(&k, v)| (k, tape.leaf(Tensor::scalar(v))))
            .collect();
        let w = LossWeights::default();
        let (_, report) = joint_loss(&mut tape, &terms, &w).unwrap();
        assert!((report.total - vals.iter().sum::<f64>()).abs() < 1e-6);
        let base = report.total;
        for (i, &k) in tasks.iter().enumerate() {
            let mut w2 = w;
            match k {
                Task::Parsing => w2.seg *= 2.0,
                Task::Landmarks => w2.lnd *= 2.0,
                Task::HeadPose => w2.hpe *= 2.0,
                Task::Attributes => w2.attr *= 2.0,
                Task::Age => w2.age *= 2.0,
                Task::Gender => w2.gender_race *= 2.0,
                Task::Expression => w2.exp *= 2.0,
                Task::Recognition => w2.fr *= 2.0,
                _ => w2.vis *= 2.0,
            }
            let (_, r2) = joint_loss(&mut tape, &terms, &w2).unwrap();
            assert!((r2.total - base - vals[i]).abs() < 1e-12, "{k}");
        }
    }

    proptest::proptest! {
        #[test]
        fn losses_are_non_negative(xs in proptest::collection::vec(-8.0f64..8.0, 24), seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(t(&[2, 3, 2, 2], &xs));
            let target: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
            let labels: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
            let bits: Vec<f64> = (0..24).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let flat = tape.reshape(l, &[8, 3]).unwrap();
            let coords = tape.reshape(l, &[2, 6, 2]).unwrap();
            let gt: Vec<f64> = (0..24).map(|_| rng.uniform()).collect();
            let losses = [
                seg_loss(&mut tape, l, &target, 1.0).unwrap(),
                ce_loss(&mut tape, flat, &labels).unwrap(),
                bce_multilabel_loss(&mut tape, l, &bits).unwrap(),
                landmark_loss(&mut tape, coords, &gt, 1.0).unwrap(),
            ];
            for v in losses {
                proptest::prop_assert!(tape.scalar(v) >= 0.0);
            }
        }
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = Rng::new(7);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_f64(
                shape,
                &(0..n).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>(),
            )
            .unwrap()
            .with_grad()
        };
        let ok = |w: Vec<f64>| assert!(w.iter().all(|&e| e < 1e-4), "{w:?}");

        let target = [0usize, 1, 2, 2, 1, 0, 0, 1];
        ok(check_tape_fn(&[rand(&[2, 3, 2, 2])], |tp, v| {
            seg_loss(tp, v[0], &target, 1.0)
        })
        .unwrap());
        let gt: Vec<f64> = (0..2 * 68 * 2)
            .map(|i| (i % 7) as f64 / 7.0 + 0.03)
            .collect();
        ok(check_tape_fn(&[rand(&[2, 68, 2])], |tp, v| {
            landmark_loss(tp, v[0], &gt, 0.3)
        })
        .unwrap());
        ok(check_tape_fn(&[rand(&[3, 5])], |tp, v| ce_loss(tp, v[0], &[4, 0, 2])).unwrap());
        ok(check_tape_fn(&[rand(&[2, 4])], |tp, v| {
            bce_multilabel_loss(tp, v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
        })
        .unwrap());
        let cfg = HeadConfig::default();
        let centers: Vec<f64> = (0..8).map(|i| cfg.age_bin_center(i)).collect();
        ok(check_tape_fn(&[rand(&[2, 8])], |tp, v| {
            let e = crate::heads::expected_value(tp, v[0], &centers)?;
            age_loss(tp, v[0], e, &[13.0, 61.0], &cfg)
        })
        .unwrap());
        // geodesic and margin losses through their normalizing producers, away from θ ∈ {0, π}
        let gt_r: Vec<f64> = [
            rot_axis([1.0, 2.0, 0.5], 1.1),
            rot_axis([0.0, -1.0, 1.0], 2.0),
        ]
        .concat();
        ok(check_tape_fn(&[rand(&[2, 3, 3])], |tp, v| {
            let r = tp.so3_project(v[0])?;
            let g = tp.constant_f64(&[2, 3, 3], &gt_r)?;
            geodesic_loss(tp, r, g)
        })
        .unwrap());
        ok(check_tape_fn(&[rand(&[3, 4]), rand(&[5, 4])], |tp, v| {
            let e = tp.l2_normalize(v[0], 1e-12)?;
            let w = tp.l2_normalize(v[1], 1e-12)?;
            margin_softmax_loss(tp, e, &[1, 4, 0], w, 0.3, 8.0)
        })
        .unwrap());
    }

    #[test]
    fn losses_are_zero_at_perfect_prediction() {
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = tape.leaf(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]));
        let l = margin_softmax_loss(&mut tape, e, &[0, 1], w, 0.3, 1e4).unwrap();
        assert!(tape.scalar(l).abs() < 1e-6);
        let x = tape.leaf(t(&[3], &[40.0, -40.0, 40.0]));
        let l = bce_multilabel_loss(&mut tape, x, &[1.0, 0.0, 1.0]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-6);
    }
}
