//! The full network: encoder, fusion, task-token decoder and heads.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::decoder::{AblationMode, Decoder, DecoderConfig, TaskTokenSet};
use crate::encoder::{check_geometry, EncoderInterface, MlpFusion, ToyEncoder};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, Selection, TaskPredictions, UnifiedHead};
use crate::nn::{AttentionConfig, InitScheme, ParamRegistry};
use crate::tensor::{Component, Real, Tape, Var};

/// Class-center table of the margin-softmax recognition loss.
pub const RECOGNITION_WEIGHT: &str = "loss.recognition.weight";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub encoder_channels: [usize; 4],
    pub d_t: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_mult: usize,
    pub ablation: AblationMode,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            encoder_channels: ToyEncoder::DEFAULT_CHANNELS,
            d_t: 32,
            num_heads: 4,
            num_layers: 2,
            ffn_mult: 4,
            ablation: AblationMode::Bidirectional,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the gradient checks.
    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            encoder_channels: [8, 8, 16, 16],
            d_t: 16,
            num_heads: 2,
            num_layers: 2,
            ffn_mult: 2,
            head: HeadConfig {
                emb_dim: 8,
                num_identities: 4,
                heatmap_side: 4,
                ..HeadConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_t, self.num_heads)
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        DecoderConfig::new(self.num_layers, self.attention()?, self.ffn_mult)
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.image_height, self.image_width)?;
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be positive".into()));
        }
        self.decoder()?;
        self.head.validate()
    }
}

/// Predictions plus the streams they were computed from.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub predictions: TaskPredictions,
    pub face_tokens: Var,
    pub task_tokens: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: ToyEncoder,
    pub fusion: MlpFusion,
    pub tokens: TaskTokenSet,
    pub decoder: Decoder,
    pub head: UnifiedHead,
}

impl Model {
    pub fn new<T: Real>(reg: &mut ParamRegistry<T>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = ToyEncoder::new(reg, "encoder", cfg.encoder_channels)?;
        let fusion = MlpFusion::new(reg, "fusion", cfg.encoder_channels, cfg.d_t)?;
        let tokens = TaskTokenSet::new(reg, "tokens", cfg.head.c_seg, cfg.d_t)?;
        let decoder = Decoder::new(reg, "decoder", cfg.decoder()?, cfg.ablation)?;
        let head = UnifiedHead::new(reg, "head", cfg.head, cfg.attention()?, cfg.ablation)?;
        reg.declare(
            RECOGNITION_WEIGHT,
            &[cfg.head.num_identities, cfg.head.emb_dim],
            InitScheme::XavierUniform,
        )?;
        Ok(Self {
            cfg,
            encoder,
            fusion,
            tokens,
            decoder,
            head,
        })
    }

    /// Runs `pixels [B, 3, H, W]` through the network, computing each task's
    /// head on the samples listed in `sel`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        pixels: Var,
        sel: &Selection,
    ) -> Result<ModelOutput> {
        self.forward_timed(tape, reg, pixels, sel, &mut StageTimes::default())
    }

    /// [`Model::forward`] that also adds the wall-clock time of each
    /// component to `times`.
    pub fn forward_timed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        pixels: Var,
        sel: &Selection,
        times: &mut StageTimes,
    ) -> Result<ModelOutput> {
        let s = tape.shape(pixels).to_vec();
        if s.len() != 4
            || s[1] != 3
            || s[2] != self.cfg.image_height
            || s[3] != self.cfg.image_width
        {
            return Err(Error::shape(
                "model_forward",
                &s,
                &[
                    s.first().copied().unwrap_or(0),
                    3,
                    self.cfg.image_height,
                    self.cfg.image_width,
                ],
            ));
        }
        let prev = tape.set_component(Component::Backbone);
        let t0 = Instant::now();
        let scales = self.encoder.forward(tape, reg, pixels)?;
        let face = self.fusion.forward(tape, reg, &scales)?;
        tape.set_component(Component::Decoder);
        let t1 = Instant::now();
        let state = self.decoder.forward(tape, reg, face, &self.tokens)?;
        tape.set_component(Component::Heads);
        let t2 = Instant::now();
        let refined = self
            .head
            .refine(tape, reg, state.task_tokens, state.face_tokens)?;
        let predictions = self.head.forward(
            tape,
            reg,
            &self.tokens,
            refined,
            state.face_tokens,
            (s[2], s[3]),
            sel,
        )?;
        let t3 = Instant::now();
        tape.set_component(prev);
        times.backbone += t1 - t0;
        times.decoder += t2 - t1;
        times.heads += t3 - t2;
        Ok(ModelOutput {
            predictions,
            face_tokens: state.face_tokens,
            task_tokens: refined,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub backbone: Duration,
    pub decoder: Duration,
    pub heads: Duration,
}

impl StageTimes {
    pub fn get(&self, c: Component) -> Duration {
        match c {
            Component::Backbone => self.backbone,
            Component::Decoder => self.decoder,
            Component::Heads => self.heads,
            Component::Loss | Component::Other => Duration::ZERO,
        }
    }

    pub fn total(&self) -> Duration {
        self.backbone + self.decoder + self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::rng::Rng;
    use crate::task::Task;
    use crate::tensor::Tensor;

    fn build(cfg: ModelConfig) -> (ParamRegistry<f64>, Model) {
        let mut reg = ParamRegistry::new();
        let m = Model::new(&mut reg, cfg).unwrap();
        init_params(&mut reg, &mut Rng::new(3));
        (reg, m)
    }

    fn pixels(rng: &mut Rng, b: usize, cfg: &ModelConfig) -> Tensor<f64> {
        let n = b * 3 * cfg.image_height * cfg.image_width;
        Tensor::from_f64(
            &[b, 3, cfg.image_height, cfg.image_width],
            &(0..n).map(|_| rng.uniform()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let cfg = ModelConfig::toy();
        let (reg, model) = build(cfg);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(pixels(&mut Rng::new(1), 2, &cfg));
        let out = model
            .forward(&mut tape, &reg, x, &Selection::all(2, &Task::ALL))
            .unwrap();
        let p = &out.predictions;
        assert_eq!(tape.shape(p.parsing.unwrap()), [2, 4, 32, 32]);
        assert_eq!(tape.shape(p.landmarks.unwrap()), [2, 68, 2]);
        assert_eq!(tape.shape(p.headpose.unwrap()), [2, 3, 3]);
        assert_eq!(tape.shape(p.attributes.unwrap()), [2, 40]);
        assert_eq!(tape.shape(p.age.unwrap()), [2]);
        assert_eq!(tape.shape(p.embedding.unwrap()), [2, 8]);
        assert_eq!(tape.shape(p.visibility.unwrap()), [2, 8]);
        for r in tape.value(p.embedding.unwrap()).chunks(8) {
            assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(tape
            .value(p.landmarks.unwrap())
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
        let flops = tape.flops_by_component();
        for c in Component::MODEL {
            assert!(flops.get(&c).copied().unwrap_or(0) > 0, "{c:?}");
        }
        assert_eq!(flops.values().sum::<u64>(), tape.total_flops());
    }

    #[test]
    fn selection_restricts_heads_to_listed_samples() {
        let cfg = ModelConfig::toy();
        let (reg, model) = build(cfg);
        let px = pixels(&mut Rng::new(2), 3, &cfg);
        let mut sel = Selection::default();
        sel.indices[Task::Gender.index()] = Some(vec![2]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(px.clone());
        let out = model.forward(&mut tape, &reg, x, &sel).unwrap();
        assert!(out.predictions.parsing.is_none());
        let one = tape.value(out.predictions.gender.unwrap()).to_vec();
        let mut full = Tape::<f64>::new();
        let x = full.leaf(px);
        let all = model
            .forward(&mut full, &reg, x, &Selection::all(3, &[Task::Gender]))
            .unwrap();
        assert_eq!(one, full.value(all.predictions.gender.unwrap())[4..6]);
    }

    #[test]
    fn no_cross_attention_predictions_ignore_the_image() {
        let cfg = ModelConfig {
            ablation: AblationMode::NoCrossAttn,
            ..ModelConfig::toy()
        };
        let (reg, model) = build(cfg);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(pixels(&mut Rng::new(4), 2, &cfg).with_grad());
        let out = model
            .forward(
                &mut tape,
                &reg,
                x,
                &Selection::all(2, &[Task::Age, Task::Landmarks]),
            )
            .unwrap();
        let age = tape.value(out.predictions.age.unwrap()).to_vec();
        assert_eq!(age[0], age[1]);
        let a = tape.sum(out.predictions.age.unwrap(), None).unwrap();
        let l = tape.sum(out.predictions.landmarks.unwrap(), None).unwrap();
        let loss = tape.add(a, l).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zeros(x, 2 * 3 * 32 * 32).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_geometry() {
        let cfg = ModelConfig::toy();
        let (reg, model) = build(cfg);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(model
            .forward(&mut tape, &reg, x, &Selection::all(1, &Task::ALL))
            .is_err());
        assert!(ModelConfig {
            image_height: 40,
            ..ModelConfig::toy()
        }
        .validate()
        .is_err());
    }
}
