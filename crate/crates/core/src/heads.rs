//! Token refinement and the ten task heads.

use serde::{Deserialize, Serialize};

use crate::decoder::{
    AblationMode, AttentionSublayer, TaskTokenSet, HEADPOSE_TOKENS, LANDMARK_TOKENS,
};
use crate::encoder::FACE_STRIDE;
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Linear, ParamRegistry};
use crate::task::Task;
use crate::tensor::{Real, Tape, Var};

pub const NUM_ATTRIBUTES: usize = 40;
/// Guard added under the square root when normalizing embeddings.
pub const EMBEDDING_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub c_seg: usize,
    pub age_bins: usize,
    pub races: usize,
    pub expressions: usize,
    pub visibility: usize,
    pub emb_dim: usize,
    pub num_identities: usize,
    pub heatmap_side: usize,
    pub max_age: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            c_seg: 4,
            age_bins: 8,
            races: 4,
            expressions: 7,
            visibility: 8,
            emb_dim: 32,
            num_identities: 16,
            heatmap_side: 8,
            max_age: 80.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("c_seg", self.c_seg),
            ("age_bins", self.age_bins),
            ("races", self.races),
            ("expressions", self.expressions),
            ("visibility", self.visibility),
            ("emb_dim", self.emb_dim),
            ("num_identities", self.num_identities),
        ];
        if let Some((name, _)) = counts.iter().find(|c| c.1 == 0) {
            return Err(Error::Config(format!("head.{name} must be positive")));
        }
        if self.heatmap_side < 4 {
            return Err(Error::Config("head.heatmap_side must be at least 4".into()));
        }
        if !(self.max_age > 0.0) {
            return Err(Error::Config("head.max_age must be positive".into()));
        }
        Ok(())
    }

    /// Center of age bin `i` with bins of equal width over `[0, max_age)`.
    pub fn age_bin_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.max_age / self.age_bins as f64
    }

    pub fn age_bin(&self, age: f64) -> Option<usize> {
        (age >= 0.0 && age < self.max_age)
            .then(|| ((age / self.max_age * self.age_bins as f64) as usize).min(self.age_bins - 1))
    }

    pub fn classes(&self, task: Task) -> usize {
        match task {
            Task::Parsing => self.c_seg,
            Task::Landmarks => LANDMARK_TOKENS * 2,
            Task::HeadPose => HEADPOSE_TOKENS,
            Task::Attributes => NUM_ATTRIBUTES,
            Task::Age => self.age_bins,
            Task::Gender => 2,
            Task::Race => self.races,
            Task::Expression => self.expressions,
            Task::Recognition => self.emb_dim,
            Task::Visibility => self.visibility,
        }
    }
}

/// Head outputs; a field is present iff its task ran on at least one sample.
#[derive(Debug, Clone, Default)]
pub struct TaskPredictions {
    /// `[b, C_seg, H, W]` logits.
    pub parsing: Option<Var>,
    /// `[b, 68, 2]` as `(x, y)` in `[0, 1]`.
    pub landmarks: Option<Var>,
    /// `[b, 68, h, h]` soft-argmax weights.
    pub heatmaps: Option<Var>,
    /// `[b, 3, 3]` rotations.
    pub headpose: Option<Var>,
    pub attributes: Option<Var>,
    pub age_logits: Option<Var>,
    /// `[b]` expected age in years.
    pub age: Option<Var>,
    pub gender: Option<Var>,
    pub race: Option<Var>,
    pub expression: Option<Var>,
    /// `[b, D_emb]` unit-norm identity embeddings.
    pub embedding: Option<Var>,
    pub visibility: Option<Var>,
}

impl TaskPredictions {
    /// Every present output in field order.
    pub fn outputs(&self) -> Vec<Var> {
        [
            self.parsing,
            self.landmarks,
            self.heatmaps,
            self.headpose,
            self.attributes,
            self.age_logits,
            self.age,
            self.gender,
            self.race,
            self.expression,
            self.embedding,
            self.visibility,
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Two linear layers with a GELU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), dim, hidden)?,
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden, out)?,
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

/// Per-pixel inner products of segmentation tokens `[b, C, D]` with face
/// tokens `[b, L, D]`, upsampled to `[b, C, H, W]`.
///
/// Bilinear upsampling commutes with the inner product, so logits are formed
/// at face-token resolution and then upsampled (C channels instead of D).
pub fn parsing_head<T: Real>(
    tape: &mut Tape<T>,
    seg_tokens: Var,
    face: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let ss = tape.shape(seg_tokens).to_vec();
    let sf = tape.shape(face).to_vec();
    let (fh, fw) = (h / FACE_STRIDE, w / FACE_STRIDE);
    if ss.len() != 3
        || sf.len() != 3
        || ss[0] != sf[0]
        || ss[2] != sf[2]
        || h % FACE_STRIDE != 0
        || w % FACE_STRIDE != 0
        || sf[1] != fh * fw
    {
        return Err(Error::shape(
            "parsing_head",
            &sf,
            &[
                ss.first().copied().unwrap_or(0),
                fh * fw,
                ss.last().copied().unwrap_or(0),
            ],
        ));
    }
    let ft = tape.transpose(face)?;
    let low = tape.matmul(seg_tokens, ft)?;
    let low = tape.reshape(low, &[ss[0], ss[1], fh, fw])?;
    tape.bilinear_resize(low, h, w)
}

/// Softmax over an `side x side` grid of logits `[.., side²]` and the expected
/// cell center `(x, y)` in `[0, 1]²`. Returns `(coords [.., 2], weights)`.
pub fn soft_argmax<T: Real>(tape: &mut Tape<T>, logits: Var, side: usize) -> Result<(Var, Var)> {
    let s = tape.shape(logits).to_vec();
    if s.last() != Some(&(side * side)) {
        return Err(Error::shape("soft_argmax", &s, &[side * side]));
    }
    let p = tape.softmax(logits, -1)?;
    let mut grid = Vec::with_capacity(side * side * 2);
    for i in 0..side {
        for j in 0..side {
            grid.push((j as f64 + 0.5) / side as f64);
            grid.push((i as f64 + 0.5) / side as f64);
        }
    }
    let g = tape.constant_f64(&[side * side, 2], &grid)?;
    let coords = tape.matmul(p, g)?;
    Ok((coords, p))
}

/// `Σ softmax(logits)_i · center_i` over the last axis of `[b, A]`.
pub fn expected_value<T: Real>(tape: &mut Tape<T>, logits: Var, centers: &[f64]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != centers.len() {
        return Err(Error::shape("expected_value", &s, &[centers.len()]));
    }
    let p = tape.softmax(logits, -1)?;
    let c = tape.constant_f64(&[centers.len(), 1], centers)?;
    let e = tape.matmul(p, c)?;
    tape.reshape(e, &[s[0]])
}

#[derive(Debug, Clone)]
pub struct UnifiedHead {
    pub cfg: HeadConfig,
    pub refine: Option<AttentionSublayer>,
    pub landmark: Mlp,
    pub headpose: Mlp,
    pub attributes: Mlp,
    pub age: Mlp,
    pub gender: Mlp,
    pub race: Mlp,
    pub expression: Mlp,
    pub recognition: Mlp,
    pub visibility: Mlp,
}

/// Per-task sample indices into the batch; `None` skips the head.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub indices: [Option<Vec<usize>>; 10],
}

impl Selection {
    pub fn all(batch: usize, tasks: &[Task]) -> Self {
        let mut s = Self::default();
        for &t in tasks {
            s.indices[t.index()] = Some((0..batch).collect());
        }
        s
    }

    pub fn get(&self, task: Task) -> Option<&[usize]> {
        self.indices[task.index()]
            .as_deref()
            .filter(|v| !v.is_empty())
    }
}

impl UnifiedHead {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cfg: HeadConfig,
        attention: AttentionConfig,
        mode: AblationMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = attention.model_dim;
        let mlp = |reg: &mut ParamRegistry<T>, name: &str, out: usize| {
            Mlp::new(reg, &format!("{prefix}.{name}"), d, d, out)
        };
        Ok(Self {
            cfg,
            refine: mode
                .reads_face()
                .then(|| AttentionSublayer::new(reg, &format!("{prefix}.refine"), attention, false))
                .transpose()?,
            landmark: mlp(reg, "landmarks", cfg.heatmap_side * cfg.heatmap_side)?,
            headpose: mlp(reg, "headpose", 1)?,
            attributes: mlp(reg, "attributes", NUM_ATTRIBUTES)?,
            age: mlp(reg, "age", cfg.age_bins)?,
            gender: mlp(reg, "gender", 2)?,
            race: mlp(reg, "race", cfg.races)?,
            expression: mlp(reg, "expression", cfg.expressions)?,
            recognition: mlp(reg, "recognition", cfg.emb_dim)?,
            visibility: mlp(reg, "visibility", cfg.visibility)?,
        })
    }

    /// One task-to-face cross-attention over the final face stream. In the
    /// no-cross-attn ablation there is no refinement and tokens pass through.
    pub fn refine<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        tokens: Var,
        face: Var,
    ) -> Result<Var> {
        match &self.refine {
            Some(r) => r.forward(tape, reg, tokens, face),
            None => Ok(tokens),
        }
    }

    pub fn landmark_head<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != LANDMARK_TOKENS {
            return Err(Error::shape("landmark_head", &s, &[0, LANDMARK_TOKENS, 0]));
        }
        let side = self.cfg.heatmap_side;
        let logits = self.landmark.forward(tape, reg, tokens)?;
        let (coords, p) = soft_argmax(tape, logits, side)?;
        let heat = tape.reshape(p, &[s[0], LANDMARK_TOKENS, side, side])?;
        Ok((coords, heat))
    }

    pub fn headpose_head<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        tokens: Var,
    ) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != HEADPOSE_TOKENS {
            return Err(Error::shape("headpose_head", &s, &[0, HEADPOSE_TOKENS, 0]));
        }
        let m = self.headpose.forward(tape, reg, tokens)?;
        let m = tape.reshape(m, &[s[0], 3, 3])?;
        tape.so3_project(m)
    }

    pub fn recognition_head<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        token: Var,
    ) -> Result<Var> {
        let e = self.recognition.forward(tape, reg, token)?;
        if cfg!(debug_assertions) {
            let d = self.cfg.emb_dim;
            let tiny = tape
                .value(e)
                .chunks(d)
                .filter(|r| r.iter().all(|v| v.as_f64().abs() < EMBEDDING_EPS))
                .count();
            if tiny > 0 {
                eprintln!("recognition_head: {tiny} embedding(s) near zero before normalization");
            }
        }
        tape.l2_normalize(e, EMBEDDING_EPS)
    }

    /// Runs every selected head on its sub-batch of the refined tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        tokens: &TaskTokenSet,
        refined: Var,
        face: Var,
        image_hw: (usize, usize),
        sel: &Selection,
    ) -> Result<TaskPredictions> {
        let batch = tape.shape(refined)[0];
        let d = tokens.dim;
        let mut out = TaskPredictions::default();
        for task in Task::ALL {
            let Some(idx) = sel.get(task) else { continue };
            if let Some(&bad) = idx.iter().find(|&&i| i >= batch) {
                return Err(Error::invalid(format!(
                    "{task}: sample {bad} outside batch of {batch}"
                )));
            }
            let (start, n) = tokens.span(task);
            let t = tape.narrow(refined, 1, start, n)?;
            let t = subset(tape, t, idx, batch)?;
            let b = idx.len();
            let single = |tape: &mut Tape<T>| tape.reshape(t, &[b, d]);
            match task {
                Task::Parsing => {
                    let f = subset(tape, face, idx, batch)?;
                    out.parsing = Some(parsing_head(tape, t, f, image_hw.0, image_hw.1)?);
                }
                Task::Landmarks => {
                    let (c, h) = self.landmark_head(tape, reg, t)?;
                    out.landmarks = Some(c);
                    out.heatmaps = Some(h);
                }
                Task::HeadPose => out.headpose = Some(self.headpose_head(tape, reg, t)?),
                Task::Attributes => {
                    let x = single(tape)?;
                    out.attributes = Some(self.attributes.forward(tape, reg, x)?);
                }
                Task::Age => {
                    let x = single(tape)?;
                    let logits = self.age.forward(tape, reg, x)?;
                    let centers: Vec<f64> = (0..self.cfg.age_bins)
                        .map(|i| self.cfg.age_bin_center(i))
                        .collect();
                    out.age = Some(expected_value(tape, logits, &centers)?);
                    out.age_logits = Some(logits);
                }
                Task::Gender => {
                    let x = single(tape)?;
                    out.gender = Some(self.gender.forward(tape, reg, x)?);
                }
                Task::Race => {
                    let x = single(tape)?;
                    out.race = Some(self.race.forward(tape, reg, x)?);
                }
                Task::Expression => {
                    let x = single(tape)?;
                    out.expression = Some(self.expression.forward(tape, reg, x)?);
                }
                Task::Recognition => {
                    let x = single(tape)?;
                    out.embedding = Some(self.recognition_head(tape, reg, x)?);
                }
                Task::Visibility => {
                    let x = single(tape)?;
                    out.visibility = Some(self.visibility.forward(tape, reg, x)?);
                }
            }
        }
        Ok(out)
    }
}

fn subset<T: Real>(tape: &mut Tape<T>, x: Var, idx: &[usize], batch: usize) -> Result<Var> {
    if idx.len() == batch && idx.iter().enumerate().all(|(i, &j)| i == j) {
        Ok(x)
    } else {
        tape.index_select(x, idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tests::sublayer_oracle;
    use crate::nn::{check_param_grads, init_params};
    use crate::rng::Rng;
    use crate::tensor::gradcheck::check_tape_fn;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_f64(
            shape,
            &(0..n).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn head(d: usize, mode: AblationMode) -> (ParamRegistry<f64>, UnifiedHead) {
        let mut reg = ParamRegistry::new();
        let cfg = HeadConfig {
            heatmap_side: 4,
            emb_dim: 4,
            ..HeadConfig::default()
        };
        let h = UnifiedHead::new(
            &mut reg,
            "head",
            cfg,
            AttentionConfig::new(d, 2).unwrap(),
            mode,
        )
        .unwrap();
        init_params(&mut reg, &mut Rng::new(1));
        (reg, h)
    }

    fn bilinear_oracle(src: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = Vec::new();
        for y in 0..oh {
            let (y0, y1, ly) = coord(y, ih, oh);
            for x in 0..ow {
                let (x0, x1, lx) = coord(x, iw, ow);
                let top = src[y0 * iw + x0] * (1.0 - lx) + src[y0 * iw + x1] * lx;
                let bot = src[y1 * iw + x0] * (1.0 - lx) + src[y1 * iw + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
        out
    }

    #[test]
    fn refine_zero_projection_and_oracle() {
        let (mut reg, h) = head(4, AblationMode::Bidirectional);
        let r = h.refine.as_ref().unwrap();
        let mut rng = Rng::new(2);
        let t = rand_tensor(&mut rng, &[1, 3, 4]);
        let f = rand_tensor(&mut rng, &[1, 5, 4]);
        let want = sublayer_oracle(r, &reg, &t, &f);
        let mut tape = Tape::new();
        let (tv, fv) = (tape.leaf(t.clone()), tape.leaf(f.clone()));
        let y = h.refine(&mut tape, &reg, tv, fv).unwrap();
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        for name in [&r.attn.out_proj.weight, &r.attn.out_proj.bias] {
            let n = reg.get(name).unwrap().numel();
            reg.set(name, vec![0.0; n]).unwrap();
        }
        let mut tape = Tape::new();
        let (tv, fv) = (tape.leaf(t.clone()), tape.leaf(f.clone()));
        let y = h.refine(&mut tape, &reg, tv, fv).unwrap();
        assert_eq!(tape.value(y), t.data());

        let (reg, h) = head(4, AblationMode::NoCrossAttn);
        assert!(h.refine.is_none() && !reg.names().any(|n| n.contains("refine")));
    }

    #[test]
    fn parsing_zero_face_and_one_hot_token() {
        let mut tape = Tape::<f64>::new();
        let seg = tape.leaf(rand_tensor(&mut Rng::new(3), &[1, 3, 4]));
        let face = tape.leaf(Tensor::zeros(&[1, 4, 4]));
        let y = parsing_head(&mut tape, seg, face, 8, 8).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 8, 8]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let e2 = tape.leaf(Tensor::from_f64(&[1, 1, 4], &[0.0, 0.0, 1.0, 0.0]).unwrap());
        let mut fc = vec![9.0; 16];
        for p in 0..4 {
            fc[p * 4 + 2] = 1.75;
        }
        let face = tape.leaf(Tensor::from_f64(&[1, 4, 4], &fc).unwrap());
        let y = parsing_head(&mut tape, e2, face, 8, 8).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - 1.75).abs() < 1e-12));
        let bad = tape.leaf(Tensor::zeros(&[1, 5, 4]));
        assert!(parsing_head(&mut tape, e2, bad, 8, 8).is_err());
    }

    #[test]
    fn parsing_matches_upsample_then_inner_product() {
        // 8x8 image, 2x2 face grid, D = 2, C = 3.
        let face = [1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, 1.0]; // [L=4, D=2]
        let tokens = [1.0, 0.0, 0.0, 1.0, 1.0, -1.0]; // [C=3, D=2]
        let channel = |d: usize| -> Vec<f64> { (0..4).map(|p| face[p * 2 + d]).collect() };
        let up: Vec<Vec<f64>> = (0..2)
            .map(|d| bilinear_oracle(&channel(d), 2, 2, 8, 8))
            .collect();
        let mut want = Vec::new();
        for c in 0..3 {
            for px in 0..64 {
                want.push(tokens[c * 2] * up[0][px] + tokens[c * 2 + 1] * up[1][px]);
            }
        }
        let mut tape = Tape::<f64>::new();
        let seg = tape.leaf(Tensor::from_f64(&[1, 3, 2], &tokens).unwrap());
        let f = tape.leaf(Tensor::from_f64(&[1, 4, 2], &face).unwrap());
        let y = parsing_head(&mut tape, seg, f, 8, 8).unwrap();
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_argmax_examples() {
        let side = 6;
        let mut tape = Tape::<f64>::new();
        let flat = tape.leaf(Tensor::zeros(&[1, side * side]));
        let (c, _) = soft_argmax(&mut tape, flat, side).unwrap();
        assert!(tape.value(c).iter().all(|v| (v - 0.5).abs() < 1e-12));

        let mut corner = vec![-1e4; side * side];
        corner[0] = 0.0;
        let x = tape.leaf(Tensor::from_f64(&[1, side * side], &corner).unwrap());
        let (c, _) = soft_argmax(&mut tape, x, side).unwrap();
        assert!(tape.value(c).iter().all(|v| *v <= 1.0 / side as f64));

        // peaked at (row 4, col 1) with temperature 0.3
        let logits: Vec<f64> = (0..side * side)
            .map(|k| {
                let (i, j) = ((k / side) as f64, (k % side) as f64);
                -((i - 4.0).powi(2) + (j - 1.0).powi(2)) / 0.3
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let (mut ex, mut ey) = (0.0, 0.0);
        for (k, l) in logits.iter().enumerate() {
            let p = l.exp() / z;
            ex += p * ((k % side) as f64 + 0.5) / side as f64;
            ey += p * ((k / side) as f64 + 0.5) / side as f64;
        }
        let x = tape.leaf(Tensor::from_f64(&[1, side * side], &logits).unwrap());
        let (c, _) = soft_argmax(&mut tape, x, side).unwrap();
        assert!((tape.value(c)[0] - ex).abs() < 1e-12 && (tape.value(c)[1] - ey).abs() < 1e-12);
    }

    #[test]
    fn classification_examples() {
        let cfg = HeadConfig::default();
        let mut tape = Tape::<f64>::new();
        let mut logits = vec![-1e3; 8];
        logits[2] = 1e3;
        let l = tape.leaf(Tensor::from_f64(&[1, 8], &logits).unwrap());
        let centers: Vec<f64> = (0..8).map(|i| cfg.age_bin_center(i)).collect();
        let e = expected_value(&mut tape, l, &centers).unwrap();
        assert!((tape.scalar(e) - 25.0).abs() < 1e-9);
        assert_eq!(cfg.age_bin(25.0), Some(2));
        assert_eq!(cfg.age_bin(80.0), None);

        let mut reg = ParamRegistry::<f64>::new();
        let mlp = Mlp::new(&mut reg, "m", 2, 2, 3).unwrap();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
        let y = mlp.forward(&mut tape, &reg, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        // fc1 = I, b1 = (1, 0); fc2 = [[1,0],[0,2],[1,1]], b2 = (0,0,-1)
        reg.set("m.fc1.weight", vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        reg.set("m.fc1.bias", vec![1.0, 0.0]).unwrap();
        reg.set("m.fc2.weight", vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0])
            .unwrap();
        reg.set("m.fc2.bias", vec![0.0, 0.0, -1.0]).unwrap();
        let g = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let (h0, h1) = (g(1.3), g(-0.7));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
        let y = mlp.forward(&mut tape, &reg, x).unwrap();
        let want = [h0, 2.0 * h1, h0 + h1 - 1.0];
        for (a, b) in tape.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recognition_is_unit_norm_and_deterministic() {
        let (reg, h) = head(8, AblationMode::Bidirectional);
        let mut tape = Tape::new();
        let row = rand_tensor(&mut Rng::new(4), &[1, 8]);
        let two = Tensor::from_f64(&[2, 8], &[row.data(), row.data()].concat()).unwrap();
        let x = tape.leaf(two);
        let e = h.recognition_head(&mut tape, &reg, x).unwrap();
        let v = tape.value(e);
        assert_eq!(v[..4], v[4..]);
        let n: f64 = v[..4].iter().map(|a| a * a).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
        assert!((n - 1.0).abs() < 1e-6, "self cosine");
    }

    #[test]
    fn headpose_output_is_rotation() {
        let (reg, h) = head(8, AblationMode::Bidirectional);
        let mut tape = Tape::new();
        let t = tape.leaf(rand_tensor(&mut Rng::new(5), &[4, 9, 8]));
        let r = h.headpose_head(&mut tape, &reg, t).unwrap();
        for m in tape.value(r).chunks(9) {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| m[k * 3 + i] * m[k * 3 + j]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
                }
            }
        }
        let short = tape.leaf(Tensor::zeros(&[1, 8, 8]));
        assert!(h.headpose_head(&mut tape, &reg, short).is_err());
    }

    #[test]
    fn forward_respects_selection() {
        let mut reg = ParamRegistry::<f64>::new();
        let tokens = TaskTokenSet::new(&mut reg, "tokens.table", 4, 8).unwrap();
        let cfg = HeadConfig {
            heatmap_side: 4,
            ..HeadConfig::default()
        };
        let h = UnifiedHead::new(
            &mut reg,
            "head",
            cfg,
            AttentionConfig::new(8, 2).unwrap(),
            AblationMode::Bidirectional,
        )
        .unwrap();
        init_params(&mut reg, &mut Rng::new(6));
        let mut tape = Tape::new();
        let t = tape.leaf(rand_tensor(&mut Rng::new(7), &[3, tokens.total(), 8]));
        let f = tape.leaf(rand_tensor(&mut Rng::new(8), &[3, 4, 8]));
        let mut sel = Selection::default();
        sel.indices[Task::Parsing.index()] = Some(vec![2]);
        sel.indices[Task::Age.index()] = Some(vec![0, 1]);
        sel.indices[Task::Recognition.index()] = Some(vec![]);
        let p = h
            .forward(&mut tape, &reg, &tokens, t, f, (8, 8), &sel)
            .unwrap();
        assert_eq!(tape.shape(p.parsing.unwrap()), &[1, 4, 8, 8]);
        assert_eq!(tape.shape(p.age.unwrap()), &[2]);
        assert_eq!(tape.shape(p.age_logits.unwrap()), &[2, 8]);
        assert!(p.embedding.is_none() && p.landmarks.is_none());

        let all = h
            .forward(
                &mut tape,
                &reg,
                &tokens,
                t,
                f,
                (8, 8),
                &Selection::all(3, &Task::ALL),
            )
            .unwrap();
        assert_eq!(tape.shape(all.landmarks.unwrap()), &[3, 68, 2]);
        assert_eq!(tape.shape(all.heatmaps.unwrap()), &[3, 68, 4, 4]);
        assert_eq!(tape.shape(all.headpose.unwrap()), &[3, 3, 3]);
        assert_eq!(tape.shape(all.attributes.unwrap()), &[3, 40]);
        assert_eq!(tape.shape(all.visibility.unwrap()), &[3, 8]);
        assert_eq!(tape.shape(all.embedding.unwrap()), &[3, 32]);
        // selected rows equal the full-batch rows
        let (a, b) = (
            tape.value(p.age.unwrap()).to_vec(),
            tape.value(all.age.unwrap()),
        );
        assert_eq!(a, b[..2]);
    }

    #[test]
    fn heads_pass_gradient_checks() {
        let mut reg = ParamRegistry::<f64>::new();
        let tokens = TaskTokenSet::new(&mut reg, "tokens.table", 2, 4).unwrap();
        let cfg = HeadConfig {
            c_seg: 2,
            heatmap_side: 4,
            emb_dim: 3,
            ..HeadConfig::default()
        };
        let h = UnifiedHead::new(
            &mut reg,
            "head",
            cfg,
            AttentionConfig::new(4, 2).unwrap(),
            AblationMode::Bidirectional,
        )
        .unwrap();
        init_params(&mut reg, &mut Rng::new(9));
        let t = rand_tensor(&mut Rng::new(10), &[2, tokens.total(), 4]);
        let f = rand_tensor(&mut Rng::new(11), &[2, 4, 4]);
        let sel = Selection::all(2, &Task::ALL);
        let probe =
            |tape: &mut Tape<f64>, reg: &ParamRegistry<f64>, t: Var, f: Var| -> Result<Var> {
                let refined = h.refine(tape, reg, t, f)?;
                let p = h.forward(tape, reg, &tokens, refined, f, (8, 8), &sel)?;
                let outs = [
                    p.parsing,
                    p.landmarks,
                    p.headpose,
                    p.attributes,
                    p.age,
                    p.gender,
                    p.race,
                    p.expression,
                    p.embedding,
                    p.visibility,
                ];
                let mut total = None;
                for (k, v) in outs.into_iter().flatten().enumerate() {
                    let n = tape.value(v).len();
                    let w: Vec<f64> = (0..n)
                        .map(|i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4)
                        .collect();
                    let shape = tape.shape(v).to_vec();
                    let wv = tape.constant_f64(&shape, &w)?;
                    let m = tape.mul(v, wv)?;
                    let s = tape.sum(m, None)?;
                    let s = if k == 4 { tape.scale(s, 0.02)? } else { s };
                    total = Some(match total {
                        Some(acc) => tape.add(acc, s)?,
                        None => s,
                    });
                }
                Ok(total.unwrap())
            };
        for (name, w) in check_param_grads(&reg, 16, |tape, reg| {
            let tv = tape.leaf(t.clone());
            let fv = tape.leaf(f.clone());
            probe(tape, reg, tv, fv)
        })
        .unwrap()
        {
            assert!(w < 1e-4, "{name}: {w}");
        }
        let worst = check_tape_fn(
            &[t.clone().with_grad(), f.clone().with_grad()],
            |tape, v| probe(tape, &reg, v[0], v[1]),
        )
        .unwrap();
        assert!(worst.iter().all(|&w| w < 1e-4), "{worst:?}");
    }
}
