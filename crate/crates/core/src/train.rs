//! Optimizer, learning-rate schedule, per-task loss assembly and the training loop.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BalancedSampler, Dataset, Label, TaskBatch};
use crate::error::{Error, Result};
use crate::heads::TaskPredictions;
use crate::losses::{self, LossConfig, LossReport, LossWeights};
use crate::model::{Model, ModelConfig, RECOGNITION_WEIGHT};
use crate::nn::{init_params, ParamRegistry};
use crate::rng::Rng;
use crate::task::Task;
use crate::tensor::{Component, Real, Tape, Tensor, Var};

/// Guard used when normalizing the recognition class centers.
const CLASS_CENTER_EPS: f64 = 1e-12;

/// `base_lr · 10^-(number of decay epochs ≤ epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay_epochs: &[usize]) -> Result<f64> {
    if decay_epochs.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!(
            "decay_epochs must be sorted, got {decay_epochs:?}"
        )));
    }
    let n = decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(base_lr * 10f64.powi(-(n as i32)))
}

/// Adam with decoupled weight decay. Moments are kept in 64-bit.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(reg: &ParamRegistry<T>, weight_decay: f64) -> Self {
        let zeros = || {
            reg.iter()
                .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<f64>] {
        &self.m
    }

    /// One update of every registry parameter; `grads` must hold all of them.
    pub fn step<T: Real>(
        &mut self,
        reg: &mut ParamRegistry<T>,
        grads: &HashMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        if self.m.len() != reg.len() {
            return Err(Error::invalid(
                "optimizer state does not match the registry",
            ));
        }
        for (name, p) in reg.iter() {
            match grads.get(name) {
                Some(g) if g.len() == p.tensor.numel() => {}
                Some(g) => {
                    return Err(Error::shape("optimizer_step", p.tensor.shape(), &[g.len()]))
                }
                None => return Err(Error::MissingGrad(name.to_string())),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (name, p)) in reg.iter_mut().enumerate() {
            let g = &grads[name];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mut x = w.as_f64();
                x -= lr * self.weight_decay * x;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::lit(x);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            max_steps: None,
            batch_size: 20,
            lr: 1e-4,
            weight_decay: 1e-5,
            decay_epochs: vec![6, 10],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        lr_schedule(0, self.lr, &self.decay_epochs).map(|_| ())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Task name, or `total`.
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step losses; rendered as tab-separated `step task loss lr` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step\ttask\tloss\tlr";

    pub fn push(&mut self, step: usize, report: &LossReport, lr: f64) {
        for (task, &loss) in &report.per_task {
            self.rows.push(LogRow {
                step,
                task: task.name().to_string(),
                loss,
                lr,
            });
        }
        self.rows.push(LogRow {
            step,
            task: "total".into(),
            loss: report.total,
            lr,
        });
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.task == "total")
            .map(|r| r.loss)
            .collect()
    }

    /// Losses print with shortest round-trip precision so logs compare bit for bit.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:?}\t{:?}", r.step, r.task, r.loss, r.lr);
        }
        s
    }
}

fn need(v: Option<Var>, task: Task) -> Result<Var> {
    v.ok_or_else(|| Error::invalid(format!("no prediction for {task}")))
}

/// Builds each present task's loss from the predictions on its samples.
pub fn task_losses<T: Real>(
    tape: &mut Tape<T>,
    reg: &ParamRegistry<T>,
    model: &Model,
    preds: &TaskPredictions,
    batch: &TaskBatch,
    cfg: &LossConfig,
) -> Result<Vec<(Task, Var)>> {
    let prev = tape.set_component(Component::Loss);
    let mut out = Vec::new();
    for (task, idx) in batch.groups() {
        let labels: Vec<&Label> = idx.iter().map(|&i| &batch.labels[i]).collect();
        let floats = |f: fn(&Label) -> Option<&[f64]>| -> Vec<f64> {
            labels
                .iter()
                .flat_map(|l| f(l).unwrap_or(&[]).to_vec())
                .collect()
        };
        let ints = |f: fn(&Label) -> Option<usize>| -> Result<Vec<usize>> {
            labels
                .iter()
                .map(|l| f(l).ok_or_else(|| Error::invalid("label does not match its task")))
                .collect()
        };
        let loss = match task {
            Task::Parsing => {
                let maps: Vec<usize> = labels
                    .iter()
                    .flat_map(|l| match l {
                        Label::Parsing(m) => m.clone(),
                        _ => Vec::new(),
                    })
                    .collect();
                losses::seg_loss(tape, need(preds.parsing, task)?, &maps, cfg.dice_smooth)?
            }
            Task::Landmarks => {
                let gt = floats(|l| {
                    if let Label::Landmarks(p) = l {
                        Some(p)
                    } else {
                        None
                    }
                });
                losses::landmark_loss(tape, need(preds.landmarks, task)?, &gt, cfg.landmark_beta)?
            }
            Task::HeadPose => {
                let gt = floats(|l| {
                    if let Label::HeadPose(r) = l {
                        Some(r)
                    } else {
                        None
                    }
                });
                let g = tape.constant_f64(&[idx.len(), 3, 3], &gt)?;
                losses::geodesic_loss(tape, need(preds.headpose, task)?, g)?
            }
            Task::Attributes => {
                let gt = floats(|l| {
                    if let Label::Attributes(b) = l {
                        Some(b)
                    } else {
                        None
                    }
                });
                losses::bce_multilabel_loss(tape, need(preds.attributes, task)?, &gt)?
            }
            Task::Visibility => {
                let gt = floats(|l| {
                    if let Label::Visibility(b) = l {
                        Some(b)
                    } else {
                        None
                    }
                });
                losses::bce_multilabel_loss(tape, need(preds.visibility, task)?, &gt)?
            }
            Task::Age => {
                let gt: Vec<f64> = labels
                    .iter()
                    .filter_map(|l| {
                        if let Label::Age(a) = l {
                            Some(*a)
                        } else {
                            None
                        }
                    })
                    .collect();
                losses::age_loss(
                    tape,
                    need(preds.age_logits, task)?,
                    need(preds.age, task)?,
                    &gt,
                    &model.cfg.head,
                )?
            }
            Task::Gender => losses::ce_loss(
                tape,
                need(preds.gender, task)?,
                &ints(|l| {
                    if let Label::Gender(k) = l {
                        Some(*k)
                    } else {
                        None
                    }
                })?,
            )?,
            Task::Race => losses::ce_loss(
                tape,
                need(preds.race, task)?,
                &ints(|l| {
                    if let Label::Race(k) = l {
                        Some(*k)
                    } else {
                        None
                    }
                })?,
            )?,
            Task::Expression => losses::ce_loss(
                tape,
                need(preds.expression, task)?,
                &ints(|l| {
                    if let Label::Expression(k) = l {
                        Some(*k)
                    } else {
                        None
                    }
                })?,
            )?,
            Task::Recognition => {
                let ids = ints(|l| {
                    if let Label::Recognition(k) = l {
                        Some(*k)
                    } else {
                        None
                    }
                })?;
                let w = reg.bind(tape, RECOGNITION_WEIGHT)?;
                let w = tape.l2_normalize(w, CLASS_CENTER_EPS)?;
                losses::margin_softmax_loss(
                    tape,
                    need(preds.embedding, task)?,
                    &ids,
                    w,
                    cfg.arcface_margin,
                    cfg.arcface_scale,
                )?
            }
        };
        out.push((task, loss));
    }
    tape.set_component(prev);
    Ok(out)
}

/// Model, parameters and optimizer state of one training run.
/// Forward pass plus the weighted joint loss of `batch` on the pixels `x`.
pub fn joint_objective<T: Real>(
    tape: &mut Tape<T>,
    reg: &ParamRegistry<T>,
    model: &Model,
    x: Var,
    batch: &TaskBatch,
    loss_cfg: &LossConfig,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let out = model.forward(tape, reg, x, &batch.selection())?;
    let terms = task_losses(tape, reg, model, &out.predictions, batch, loss_cfg)?;
    losses::joint_loss(tape, &terms, weights)
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model,
    pub reg: ParamRegistry<T>,
    pub opt: AdamW,
    pub weights: LossWeights,
    pub loss_cfg: LossConfig,
    pub steps_done: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model_cfg: ModelConfig,
        seed: u64,
        weights: LossWeights,
        loss_cfg: LossConfig,
        weight_decay: f64,
    ) -> Result<Self> {
        weights.validate()?;
        loss_cfg.validate()?;
        let mut reg = ParamRegistry::new();
        let model = Model::new(&mut reg, model_cfg)?;
        init_params(&mut reg, &mut Rng::new(seed));
        let opt = AdamW::new(&reg, weight_decay);
        Ok(Self {
            model,
            reg,
            opt,
            weights,
            loss_cfg,
            steps_done: 0,
        })
    }

    fn forward_loss(&self, tape: &mut Tape<T>, batch: &TaskBatch) -> Result<(Var, LossReport)> {
        let x = tape.leaf(batch.images.cast());
        let (total, report) = joint_objective(
            tape,
            &self.reg,
            &self.model,
            x,
            batch,
            &self.loss_cfg,
            &self.weights,
        )?;
        if let Some((task, &value)) = report.per_task.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.steps_done,
                task: task.name().to_string(),
                value,
            });
        }
        Ok((total, report))
    }

    /// Joint loss on `batch` without updating anything.
    pub fn loss(&self, batch: &TaskBatch) -> Result<LossReport> {
        let mut tape = Tape::new();
        Ok(self.forward_loss(&mut tape, batch)?.1)
    }

    /// Gradients of the joint loss for every registry parameter (zeros for
    /// parameters the batch does not reach).
    pub fn gradients(&self, batch: &TaskBatch) -> Result<(HashMap<String, Vec<T>>, LossReport)> {
        let mut tape = Tape::new();
        let (total, report) = self.forward_loss(&mut tape, batch)?;
        let bound: HashMap<String, Var> = tape.params().iter().cloned().collect();
        let grads = tape.backward(total)?;
        let map = self
            .reg
            .iter()
            .map(|(name, p)| {
                let g = match bound.get(name) {
                    Some(&v) => grads.get_or_zeros(v, p.tensor.numel()),
                    None => vec![T::zero(); p.tensor.numel()],
                };
                (name.to_string(), g)
            })
            .collect();
        Ok((map, report))
    }

    pub fn step(&mut self, batch: &TaskBatch, lr: f64) -> Result<LossReport> {
        let (grads, report) = self.gradients(batch)?;
        self.opt.step(&mut self.reg, &grads, lr)?;
        self.steps_done += 1;
        Ok(report)
    }

    /// Runs the configured schedule over `datasets`; sampling is seeded by `seed`.
    pub fn train(
        &mut self,
        datasets: &[Dataset],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<MetricsLog> {
        cfg.validate()?;
        let sizes: Vec<(Task, usize)> = datasets.iter().map(|d| (d.task, d.len())).collect();
        let mut sampler = BalancedSampler::new(&sizes, cfg.batch_size, seed ^ 0x5eed_5a3b_1e00)?;
        let per_epoch = sampler.batches_per_epoch();
        let mut total = cfg.epochs * per_epoch;
        if let Some(m) = cfg.max_steps {
            total = total.min(m);
        }
        let mut log = MetricsLog::default();
        for step in 0..total {
            let lr = lr_schedule(step / per_epoch, cfg.lr, &cfg.decay_epochs)?;
            let batch = TaskBatch::collect(datasets, &sampler.next_batch())?;
            let report = self.step(&batch, lr)?;
            log.push(step, &report, lr);
        }
        Ok(log)
    }
}
