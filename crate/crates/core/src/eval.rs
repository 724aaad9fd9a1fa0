//! Per-task evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{euler_from_rotation, Dataset, Label, LEFT_EYE_OUTER, RIGHT_EYE_OUTER};
use crate::decoder::LANDMARK_TOKENS;
use crate::error::{Error, Result};
use crate::heads::Selection;
use crate::model::Model;
use crate::nn::ParamRegistry;
use crate::task::Task;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Metric values per task; accuracies and F1 are percentages, NME is a
/// fraction of the inter-ocular distance, pose MAE is in degrees.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<Task, BTreeMap<&'static str, f64>>,
}

impl EvalReport {
    pub fn get(&self, task: Task, metric: &str) -> Option<f64> {
        self.tasks.get(&task)?.get(metric).copied()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (task, m) in &self.tasks {
            for (name, v) in m {
                let _ = writeln!(s, "{:<12} {:<24} {:>10.4}", task.name(), name, v);
            }
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub pixel_accuracy: f64,
    pub mean_f1: f64,
}

/// Pixel accuracy and the mean over classes of per-class F1; classes absent
/// from both maps are skipped.
pub fn segmentation_scores(pred: &[usize], gt: &[usize], classes: usize) -> SegScores {
    let (mut tp, mut fp, mut fneg) = (
        vec![0usize; classes],
        vec![0usize; classes],
        vec![0usize; classes],
    );
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let f1: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    SegScores {
        pixel_accuracy: pct(tp.iter().sum(), gt.len()),
        mean_f1: 100.0 * f1.iter().sum::<f64>() / f1.len().max(1) as f64,
    }
}

/// Mean landmark distance over outer-eye-corner distance, per sample, then averaged.
/// Coordinates are normalized and scaled to pixels by `(h, w)`.
pub fn nme(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let per = LANDMARK_TOKENS * 2;
    let n = gt.len() / per;
    let dist = |a: &[f64], b: &[f64], i: usize| {
        ((a[2 * i] - b[2 * i]) * w as f64).hypot((a[2 * i + 1] - b[2 * i + 1]) * h as f64)
    };
    let total: f64 = (0..n)
        .map(|s| {
            let (p, g) = (&pred[s * per..(s + 1) * per], &gt[s * per..(s + 1) * per]);
            let iod = ((g[2 * RIGHT_EYE_OUTER] - g[2 * LEFT_EYE_OUTER]) * w as f64)
                .hypot((g[2 * RIGHT_EYE_OUTER + 1] - g[2 * LEFT_EYE_OUTER + 1]) * h as f64);
            (0..LANDMARK_TOKENS).map(|i| dist(p, g, i)).sum::<f64>() / LANDMARK_TOKENS as f64 / iod
        })
        .sum();
    total / n.max(1) as f64
}

/// Mean absolute yaw/pitch/roll error in degrees over row-major `[N, 9]` rotations.
pub fn pose_mae_deg(pred: &[f64], gt: &[f64]) -> f64 {
    let wrap = |d: f64| (d + 180.0).rem_euclid(360.0) - 180.0;
    let n = gt.len() / 9;
    let total: f64 = (0..n)
        .map(|s| {
            let a = euler_from_rotation(&pred[s * 9..s * 9 + 9]);
            let b = euler_from_rotation(&gt[s * 9..s * 9 + 9]);
            (wrap(a.0 - b.0).abs() + wrap(a.1 - b.1).abs() + wrap(a.2 - b.2).abs()) / 3.0
        })
        .sum();
    total / n.max(1) as f64
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> f64 {
    pct(
        pred.iter().zip(gt).filter(|(a, b)| a == b).count(),
        gt.len(),
    )
}

/// Share of bits where `logit > 0` agrees with the target.
pub fn bit_accuracy(logits: &[f64], bits: &[f64]) -> f64 {
    pct(
        logits
            .iter()
            .zip(bits)
            .filter(|(&l, &b)| (l > 0.0) == (b == 1.0))
            .count(),
        bits.len(),
    )
}

/// Best same/different accuracy over cosine thresholds on all pairs of
/// embeddings `[N, dim]`.
pub fn verification_accuracy(emb: &[f64], dim: usize, ids: &[usize]) -> f64 {
    let n = ids.len();
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&emb[i * dim..(i + 1) * dim], &emb[j * dim..(j + 1) * dim]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            pairs.push((dot / (na * nb).max(f64::MIN_POSITIVE), ids[i] == ids[j]));
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // threshold above everything: all pairs called different
    let negatives = pairs.iter().filter(|p| !p.1).count();
    let mut correct = negatives;
    let mut best = correct;
    let mut k = 0;
    while k < pairs.len() {
        let s = pairs[k].0;
        while k < pairs.len() && pairs[k].0 == s {
            correct = if pairs[k].1 { correct + 1 } else { correct - 1 };
            k += 1;
        }
        best = best.max(correct);
    }
    pct(best, pairs.len())
}

/// Highest recall among score thresholds whose precision is at least `target`.
pub fn recall_at_precision(scores: &[f64], positive: &[bool], target: f64) -> f64 {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut taken, mut best) = (0usize, 0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += positive[order[k]] as usize;
            taken += 1;
            k += 1;
        }
        if tp as f64 >= target * taken as f64 {
            best = best.max(tp);
        }
    }
    pct(best, total_pos)
}

fn values<T: Real>(tape: &Tape<T>, v: Option<Var>) -> Result<Vec<f64>> {
    let v = v.ok_or_else(|| Error::invalid("missing prediction"))?;
    Ok(tape.value(v).iter().map(|x| x.as_f64()).collect())
}

/// Runs the model over every dataset and computes that task's metrics.
pub fn evaluate<T: Real>(
    model: &Model,
    reg: &ParamRegistry<T>,
    datasets: &[Dataset],
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::invalid("evaluate: batch size must be positive"));
    }
    let (h, w) = (model.cfg.image_height, model.cfg.image_width);
    let hc = model.cfg.head;
    let mut report = EvalReport::default();
    for ds in datasets {
        if (ds.cfg.image_height, ds.cfg.image_width) != (h, w) || ds.cfg.head != hc {
            return Err(Error::Config(format!(
                "{} dataset does not match the model configuration",
                ds.task
            )));
        }
        let task = ds.task;
        let mut out: Vec<f64> = Vec::new();
        let mut extra: Vec<f64> = Vec::new();
        for chunk in ds.samples.chunks(batch_size) {
            let b = chunk.len();
            let pixels: Vec<T> = chunk
                .iter()
                .flat_map(|s| s.image.iter().map(|&v| T::lit(v as f64)))
                .collect();
            let mut tape = Tape::<T>::new();
            let x = tape.leaf(Tensor::new(&[b, 3, h, w], pixels)?);
            let p = model
                .forward(&mut tape, reg, x, &Selection::all(b, &[task]))?
                .predictions;
            let (main, aux) = match task {
                Task::Parsing => (p.parsing, None),
                Task::Landmarks => (p.landmarks, None),
                Task::HeadPose => (p.headpose, None),
                Task::Attributes => (p.attributes, None),
                Task::Age => (p.age_logits, p.age),
                Task::Gender => (p.gender, None),
                Task::Race => (p.race, None),
                Task::Expression => (p.expression, None),
                Task::Recognition => (p.embedding, None),
                Task::Visibility => (p.visibility, None),
            };
            out.extend(values(&tape, main)?);
            if aux.is_some() {
                extra.extend(values(&tape, aux)?);
            }
        }
        let labels: Vec<&Label> = ds.samples.iter().map(|s| &s.label).collect();
        let floats =
            |f: fn(&Label) -> Vec<f64>| -> Vec<f64> { labels.iter().flat_map(|l| f(l)).collect() };
        let ints = |f: fn(&Label) -> usize| -> Vec<usize> { labels.iter().map(|l| f(l)).collect() };
        let classes = hc.classes(task);
        let mut m = BTreeMap::new();
        match task {
            Task::Parsing => {
                let hw = h * w;
                let pred: Vec<usize> = (0..out.len() / (classes * hw))
                    .flat_map(|s| {
                        let img = &out[s * classes * hw..(s + 1) * classes * hw];
                        (0..hw).map(move |px| {
                            argmax(&(0..classes).map(|c| img[c * hw + px]).collect::<Vec<_>>())
                        })
                    })
                    .collect();
                let gt: Vec<usize> = labels
                    .iter()
                    .flat_map(|l| {
                        if let Label::Parsing(m) = l {
                            m.clone()
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                let sc = segmentation_scores(&pred, &gt, classes);
                m.insert("pixel_accuracy", sc.pixel_accuracy);
                m.insert("mean_f1", sc.mean_f1);
            }
            Task::Landmarks => {
                let gt = floats(|l| {
                    if let Label::Landmarks(p) = l {
                        p.clone()
                    } else {
                        Vec::new()
                    }
                });
                m.insert("nme", nme(&out, &gt, h, w));
            }
            Task::HeadPose => {
                let gt = floats(|l| {
                    if let Label::HeadPose(r) = l {
                        r.to_vec()
                    } else {
                        Vec::new()
                    }
                });
                m.insert("mae_deg", pose_mae_deg(&out, &gt));
            }
            Task::Attributes | Task::Visibility => {
                let gt = floats(|l| match l {
                    Label::Attributes(b) | Label::Visibility(b) => b.clone(),
                    _ => Vec::new(),
                });
                m.insert("accuracy", bit_accuracy(&out, &gt));
                if task == Task::Visibility {
                    let scores: Vec<f64> = out.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
                    let pos: Vec<bool> = gt.iter().map(|&b| b == 1.0).collect();
                    m.insert("recall_at_p80", recall_at_precision(&scores, &pos, 0.8));
                }
            }
            Task::Age => {
                let ages = floats(|l| {
                    if let Label::Age(a) = l {
                        vec![*a]
                    } else {
                        Vec::new()
                    }
                });
                let pred: Vec<usize> = out.chunks(classes).map(argmax).collect();
                let gt: Vec<usize> = ages
                    .iter()
                    .map(|&a| hc.age_bin(a).unwrap_or(usize::MAX))
                    .collect();
                m.insert("bin_accuracy", accuracy(&pred, &gt));
                m.insert(
                    "mae_years",
                    extra
                        .iter()
                        .zip(&ages)
                        .map(|(e, a)| (e - a).abs())
                        .sum::<f64>()
                        / ages.len() as f64,
                );
            }
            Task::Gender | Task::Race | Task::Expression => {
                let gt = ints(|l| match l {
                    Label::Gender(k) | Label::Race(k) | Label::Expression(k) => *k,
                    _ => usize::MAX,
                });
                let pred: Vec<usize> = out.chunks(classes).map(argmax).collect();
                m.insert("accuracy", accuracy(&pred, &gt));
            }
            Task::Recognition => {
                let ids = ints(|l| {
                    if let Label::Recognition(k) = l {
                        *k
                    } else {
                        usize::MAX
                    }
                });
                m.insert(
                    "verification_accuracy",
                    verification_accuracy(&out, hc.emb_dim, &ids),
                );
            }
        }
        report.tasks.insert(task, m);
    }
    Ok(report)
}
