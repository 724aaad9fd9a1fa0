//! Procedural face datasets with exact labels, and the task-balanced sampler.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::decoder::LANDMARK_TOKENS;
use crate::encoder::check_geometry;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, Selection, NUM_ATTRIBUTES};
use crate::rng::Rng;
use crate::task::Task;
use crate::tensor::Tensor;

pub const CLASS_BACKGROUND: usize = 0;
pub const CLASS_SKIN: usize = 1;
pub const CLASS_EYES: usize = 2;
pub const CLASS_MOUTH: usize = 3;
/// Outer eye corners, used for inter-ocular normalization.
pub const LEFT_EYE_OUTER: usize = 36;
pub const RIGHT_EYE_OUTER: usize = 45;
/// Largest identity count the renderer can tell apart.
pub const MAX_IDENTITIES: usize = 64;

const MAX_YAW: f64 = 30.0;
const MAX_PITCH: f64 = 30.0;
const MAX_ROLL: f64 = 20.0;
const BAND_HEIGHT: f64 = 0.08;
const BACKGROUND: [f64; 3] = [0.12, 0.14, 0.18];
const SKIN: [[f64; 3]; 4] = [
    [0.95, 0.80, 0.70],
    [0.80, 0.60, 0.45],
    [0.55, 0.38, 0.25],
    [0.90, 0.75, 0.50],
];
const PALETTE: [[f64; 3]; 8] = [
    [0.05, 0.05, 0.05],
    [0.20, 0.35, 0.90],
    [0.10, 0.70, 0.30],
    [0.55, 0.30, 0.10],
    [0.60, 0.60, 0.60],
    [0.90, 0.90, 0.20],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.85],
];
const MOUTH: [f64; 3] = [0.70, 0.10, 0.15];
const OCCLUDER: [f64; 3] = [0.10, 0.10, 0.90];
/// Landmark index ranges of the eight occludable regions.
const REGIONS: [(usize, usize); 8] = [
    (0, 6),
    (11, 17),
    (17, 22),
    (22, 27),
    (27, 36),
    (36, 42),
    (42, 48),
    (48, 68),
];

/// `R = Rz(roll) · Ry(yaw) · Rx(pitch)`, row-major, angles in degrees.
pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> [f64; 9] {
    let (sy, cy) = yaw.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sr, cr) = roll.to_radians().sin_cos();
    [
        cr * cy,
        cr * sy * sp - sr * cp,
        cr * sy * cp + sr * sp,
        sr * cy,
        sr * sy * sp + cr * cp,
        sr * sy * cp - cr * sp,
        -sy,
        cy * sp,
        cy * cp,
    ]
}

/// Inverse of [`rotation_from_euler`] for |yaw| < 90°: `(yaw, pitch, roll)` in degrees.
pub fn euler_from_rotation(r: &[f64]) -> (f64, f64, f64) {
    let yaw = (-r[6]).clamp(-1.0, 1.0).asin();
    let pitch = r[7].atan2(r[8]);
    let roll = r[3].atan2(r[0]);
    (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
}

/// Generating parameters of one rendered face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub center: (f64, f64),
    pub scale: f64,
    pub age: f64,
    pub gender: usize,
    pub race: usize,
    pub expression: usize,
    pub identity: usize,
    pub attribute_level: usize,
    pub occluded: [bool; 8],
}

impl FaceParams {
    fn random(rng: &mut Rng, cfg: &HeadConfig) -> Self {
        Self {
            yaw: rng.range(-MAX_YAW, MAX_YAW),
            pitch: rng.range(-MAX_PITCH, MAX_PITCH),
            roll: rng.range(-MAX_ROLL, MAX_ROLL),
            center: (0.5 + rng.range(-0.03, 0.03), 0.52 + rng.range(-0.03, 0.03)),
            scale: rng.range(0.9, 1.05),
            age: rng.range(0.0, cfg.max_age),
            gender: rng.below(2),
            race: rng.below(cfg.races),
            expression: rng.below(cfg.expressions),
            identity: rng.below(cfg.num_identities),
            attribute_level: rng.below(NUM_ATTRIBUTES + 1),
            occluded: [false; 8],
        }
    }

    pub fn rotation(&self) -> [f64; 9] {
        rotation_from_euler(self.yaw, self.pitch, self.roll)
    }

    pub fn attributes(&self) -> Vec<f64> {
        (0..NUM_ATTRIBUTES)
            .map(|k| if k < self.attribute_level { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn visibility(&self) -> Vec<f64> {
        self.occluded
            .iter()
            .map(|&o| if o { 0.0 } else { 1.0 })
            .collect()
    }

    /// Mouth half-axes in template units.
    fn mouth_axes(&self) -> (f64, f64) {
        let e = self.expression as f64;
        (0.28 + 0.035 * e, 0.06 + 0.025 * e)
    }

    /// 68 template points in face coordinates (x right, y down, z toward the viewer).
    fn template(&self) -> Vec<[f64; 3]> {
        let mut p = Vec::with_capacity(LANDMARK_TOKENS);
        for i in 0..17 {
            let t = PI * i as f64 / 16.0;
            p.push([-t.cos(), 1.05 * t.sin(), 0.0]);
        }
        for side in [-1.0, 1.0] {
            for j in 0..5 {
                let f = j as f64 / 4.0;
                let x = if side < 0.0 {
                    -0.7 + 0.5 * f
                } else {
                    0.2 + 0.5 * f
                };
                p.push([x, -0.48 - 0.06 * (PI * f).sin(), 0.3]);
            }
        }
        for i in 0..4 {
            p.push([0.0, -0.3 + 0.12 * i as f64, 0.35 + 0.1 * i as f64]);
        }
        for j in 0..5 {
            p.push([-0.16 + 0.08 * j as f64, 0.15, 0.4]);
        }
        let (ex, ey, erx, ery) = (0.42, -0.2, 0.22, 0.14);
        for (cx, angles) in [
            (-ex, [180.0, 120.0, 60.0, 0.0, -60.0, -120.0]),
            (ex, [180.0, 120.0, 60.0, 0.0, -60.0, -120.0]),
        ] {
            for a in angles {
                let a: f64 = f64::to_radians(a);
                p.push([cx + erx * a.cos(), ey - ery * a.sin(), 0.3]);
            }
        }
        let (mrx, mry) = self.mouth_axes();
        for k in 0..12 {
            let a = PI - k as f64 * PI / 6.0;
            p.push([mrx * a.cos(), 0.45 - mry * a.sin(), 0.3]);
        }
        for k in 0..8 {
            let a = PI - k as f64 * PI / 4.0;
            p.push([0.6 * mrx * a.cos(), 0.45 - 0.6 * mry * a.sin(), 0.3]);
        }
        debug_assert_eq!(p.len(), LANDMARK_TOKENS);
        p
    }

    /// Half-width of the face in normalized image units.
    fn face_size(&self) -> f64 {
        0.3 * self.scale
    }

    fn project(&self, r: &[f64; 9], t: [f64; 3]) -> (f64, f64) {
        let s = self.face_size();
        let x = r[0] * t[0] + r[1] * t[1] + r[2] * t[2];
        let y = r[3] * t[0] + r[4] * t[1] + r[5] * t[2];
        (self.center.0 + s * x, self.center.1 + s * y)
    }

    /// Normalized landmark coordinates `[68 * 2]` in `[0, 1]`.
    pub fn landmarks(&self) -> Vec<f64> {
        let r = self.rotation();
        self.template()
            .into_iter()
            .flat_map(|t| {
                let (u, v) = self.project(&r, t);
                [u, v]
            })
            .collect()
    }

    /// Renders `[3, H, W]` pixels and the `[H, W]` class map.
    pub fn render(&self, h: usize, w: usize) -> (Vec<f32>, Vec<usize>) {
        let r = self.rotation();
        let lm: Vec<(f64, f64)> = self
            .template()
            .into_iter()
            .map(|t| self.project(&r, t))
            .collect();
        let s = self.face_size();
        let half = (s * if self.gender == 1 { 1.08 } else { 0.92 }, s * 1.15);
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let brightness = 1.0 - 0.55 * self.age / 80.0;
        let skin = SKIN[self.race % SKIN.len()].map(|c| c * brightness);
        let eye = PALETTE[self.identity % 8];
        let mark = PALETTE[(self.identity / 8) % 8];
        let mark_at = self.project(&r, [0.0, -0.72, 0.3]);
        let nose = lm[30];
        let band = self.attribute_level as f64 / NUM_ATTRIBUTES as f64;
        let occluders: Vec<(f64, f64)> = REGIONS
            .iter()
            .zip(self.occluded)
            .filter(|(_, o)| *o)
            .map(|(&(a, b), _)| {
                let n = (b - a) as f64;
                (
                    lm[a..b].iter().map(|p| p.0).sum::<f64>() / n,
                    lm[a..b].iter().map(|p| p.1).sum::<f64>() / n,
                )
            })
            .collect();
        let mut img = vec![0f32; 3 * h * w];
        let mut classes = vec![CLASS_BACKGROUND; h * w];
        for y in 0..h {
            let v = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let mut c = if v < BAND_HEIGHT {
                    [band, band, 0.5]
                } else {
                    BACKGROUND
                };
                let mut cls = CLASS_BACKGROUND;
                let (du, dv) = (u - self.center.0, v - self.center.1);
                let (lu, lv) = (cr * du + sr * dv, -sr * du + cr * dv);
                if (lu / half.0).powi(2) + (lv / half.1).powi(2) <= 1.0 {
                    cls = CLASS_SKIN;
                    c = skin;
                    if dist2((u, v), mark_at) <= (0.18 * s).powi(2) {
                        c = mark;
                    }
                    if dist2((u, v), nose) <= (0.1 * s).powi(2) {
                        c = skin.map(|k| 0.7 * k);
                    }
                }
                if in_polygon((u, v), &lm[36..42]) || in_polygon((u, v), &lm[42..48]) {
                    cls = CLASS_EYES;
                    c = eye;
                }
                if in_polygon((u, v), &lm[48..60]) {
                    cls = CLASS_MOUTH;
                    c = MOUTH;
                }
                if occluders
                    .iter()
                    .any(|o| (u - o.0).abs() <= 0.16 * s && (v - o.1).abs() <= 0.16 * s)
                {
                    c = OCCLUDER;
                }
                for (ch, val) in c.iter().enumerate() {
                    img[(ch * h + y) * w + x] = val.clamp(0.0, 1.0) as f32;
                }
                classes[y * w + x] = cls;
            }
        }
        (img, classes)
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Even-odd rule point-in-polygon.
fn in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Class map `[H, W]`.
    Parsing(Vec<usize>),
    /// Normalized `(x, y)` pairs `[68 * 2]`.
    Landmarks(Vec<f64>),
    /// Row-major rotation matrix.
    HeadPose([f64; 9]),
    Attributes(Vec<f64>),
    Age(f64),
    Gender(usize),
    Race(usize),
    Expression(usize),
    Recognition(usize),
    Visibility(Vec<f64>),
}

impl Label {
    pub fn task(&self) -> Task {
        match self {
            Label::Parsing(_) => Task::Parsing,
            Label::Landmarks(_) => Task::Landmarks,
            Label::HeadPose(_) => Task::HeadPose,
            Label::Attributes(_) => Task::Attributes,
            Label::Age(_) => Task::Age,
            Label::Gender(_) => Task::Gender,
            Label::Race(_) => Task::Race,
            Label::Expression(_) => Task::Expression,
            Label::Recognition(_) => Task::Recognition,
            Label::Visibility(_) => Task::Visibility,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub params: FaceParams,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub cfg: DataConfig,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Renders `size` samples for `task`; sample `i` depends only on `(task, i, seed)`.
pub fn generate_dataset(task: Task, size: usize, seed: u64, cfg: &DataConfig) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::invalid("generate_dataset: size must be at least 1"));
    }
    check_geometry(cfg.image_height, cfg.image_width)?;
    cfg.head.validate()?;
    if cfg.head.num_identities > MAX_IDENTITIES {
        return Err(Error::Config(format!(
            "at most {MAX_IDENTITIES} identities can be rendered"
        )));
    }
    let hc = &cfg.head;
    let samples = (0..size)
        .map(|i| {
            let mut rng = Rng::with_stream(seed, ((task.index() as u64) << 32) | i as u64);
            let mut p = FaceParams::random(&mut rng, hc);
            match task {
                Task::Gender => p.gender = i % 2,
                Task::Race => p.race = i % hc.races,
                Task::Expression => p.expression = i % hc.expressions,
                Task::Age => {
                    let width = hc.max_age / hc.age_bins as f64;
                    p.age = ((i % hc.age_bins) as f64 + rng.range(0.1, 0.9)) * width;
                }
                Task::Recognition => p.identity = i % hc.num_identities.min(size.div_ceil(2)),
                Task::Attributes => {
                    p.attribute_level = if size == 1 {
                        NUM_ATTRIBUTES / 2
                    } else {
                        (i * NUM_ATTRIBUTES + (size - 1) / 2) / (size - 1)
                    }
                }
                Task::Visibility => {
                    for o in p.occluded.iter_mut() {
                        *o = rng.bernoulli(0.3);
                    }
                    p.occluded[i % 8] = true;
                    p.occluded[(i + 4) % 8] = false;
                }
                Task::Parsing | Task::Landmarks | Task::HeadPose => {}
            }
            let (image, classes) = p.render(cfg.image_height, cfg.image_width);
            let label = match task {
                Task::Parsing => Label::Parsing(classes),
                Task::Landmarks => Label::Landmarks(p.landmarks()),
                Task::HeadPose => Label::HeadPose(p.rotation()),
                Task::Attributes => Label::Attributes(p.attributes()),
                Task::Age => Label::Age(p.age),
                Task::Gender => Label::Gender(p.gender),
                Task::Race => Label::Race(p.race),
                Task::Expression => Label::Expression(p.expression),
                Task::Recognition => Label::Recognition(p.identity),
                Task::Visibility => Label::Visibility(p.visibility()),
            };
            SyntheticSample {
                params: p,
                image,
                label,
            }
        })
        .collect();
    Ok(Dataset {
        task,
        cfg: *cfg,
        samples,
    })
}

#[derive(Debug, Clone)]
struct TaskQueue {
    task: Task,
    size: usize,
    order: Vec<usize>,
    pos: usize,
}

/// Draws `B / num_tasks` samples per task per batch, cycling and reshuffling
/// each task's indices independently.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    queues: Vec<TaskQueue>,
    per_task: usize,
    rng: Rng,
}

impl BalancedSampler {
    pub fn new(sizes: &[(Task, usize)], batch_size: usize, seed: u64) -> Result<Self> {
        if sizes.is_empty() || batch_size == 0 {
            return Err(Error::invalid(
                "sampler needs at least one task and a positive batch size",
            ));
        }
        if batch_size % sizes.len() != 0 {
            return Err(Error::invalid(format!(
                "batch size {batch_size} is not divisible by {} tasks",
                sizes.len()
            )));
        }
        let mut rng = Rng::new(seed);
        let mut queues: Vec<TaskQueue> = Vec::with_capacity(sizes.len());
        for &(task, size) in sizes {
            if size == 0 {
                return Err(Error::invalid(format!("dataset for {task} is empty")));
            }
            if queues.iter().any(|q| q.task == task) {
                return Err(Error::invalid(format!("task {task} listed twice")));
            }
            let mut order: Vec<usize> = (0..size).collect();
            rng.shuffle(&mut order);
            queues.push(TaskQueue {
                task,
                size,
                order,
                pos: 0,
            });
        }
        queues.sort_by_key(|q| q.task);
        Ok(Self {
            queues,
            per_task: batch_size / sizes.len(),
            rng,
        })
    }

    pub fn per_task(&self) -> usize {
        self.per_task
    }

    /// Batches needed to visit the largest dataset once.
    pub fn batches_per_epoch(&self) -> usize {
        let largest = self.queues.iter().map(|q| q.size).max().unwrap_or(0);
        largest.div_ceil(self.per_task)
    }

    /// `(task, sample index)` pairs grouped by task in token order.
    pub fn next_batch(&mut self) -> Vec<(Task, usize)> {
        let mut out = Vec::with_capacity(self.per_task * self.queues.len());
        for q in &mut self.queues {
            for _ in 0..self.per_task {
                if q.pos == q.size {
                    self.rng.shuffle(&mut q.order);
                    q.pos = 0;
                }
                out.push((q.task, q.order[q.pos]));
                q.pos += 1;
            }
        }
        out
    }
}

/// Images of a mixed-task batch with each sample's label.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    /// `[B, 3, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<Label>,
}

impl TaskBatch {
    pub fn collect(datasets: &[Dataset], picks: &[(Task, usize)]) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::invalid("no datasets"))?;
        let (h, w) = (first.cfg.image_height, first.cfg.image_width);
        let mut pixels = Vec::with_capacity(picks.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(picks.len());
        for &(task, i) in picks {
            let ds = datasets
                .iter()
                .find(|d| d.task == task)
                .ok_or_else(|| Error::invalid(format!("no dataset for {task}")))?;
            if (ds.cfg.image_height, ds.cfg.image_width) != (h, w) {
                return Err(Error::invalid("datasets disagree on image size"));
            }
            let s = ds
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("{task} has no sample {i}")))?;
            pixels.extend_from_slice(&s.image);
            labels.push(s.label.clone());
        }
        Ok(Self {
            images: Tensor::new(&[picks.len(), 3, h, w], pixels)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Batch positions of each task's samples.
    pub fn groups(&self) -> BTreeMap<Task, Vec<usize>> {
        let mut g: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            g.entry(l.task()).or_default().push(i);
        }
        g
    }

    pub fn selection(&self) -> Selection {
        let mut s = Selection::default();
        for (task, idx) in self.groups() {
            s.indices[task.index()] = Some(idx);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(side: usize) -> DataConfig {
        DataConfig {
            image_height: side,
            image_width: side,
            head: HeadConfig::default(),
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_dependent() {
        for task in Task::ALL {
            let a = generate_dataset(task, 5, 9, &cfg(32)).unwrap();
            let b = generate_dataset(task, 5, 9, &cfg(32)).unwrap();
            assert_eq!(a, b, "{task}");
            let c = generate_dataset(task, 5, 10, &cfg(32)).unwrap();
            assert_ne!(a.samples[0].image, c.samples[0].image);
        }
        assert!(generate_dataset(Task::Age, 0, 1, &cfg(32)).is_err());
    }

    #[test]
    fn headpose_angles_round_trip_through_the_stored_matrix() {
        let ds = generate_dataset(Task::HeadPose, 50, 3, &cfg(32)).unwrap();
        for s in &ds.samples {
            let Label::HeadPose(r) = s.label else {
                panic!()
            };
            let (y, p, ro) = euler_from_rotation(&r);
            assert!(
                (y - s.params.yaw).abs() < 1e-6
                    && (p - s.params.pitch).abs() < 1e-6
                    && (ro - s.params.roll).abs() < 1e-6
            );
            let back = rotation_from_euler(y, p, ro);
            assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() < 1e-6));
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parsing_classes_partition_the_image() {
        let ds = generate_dataset(Task::Parsing, 12, 4, &cfg(64)).unwrap();
        for s in &ds.samples {
            let Label::Parsing(map) = &s.label else {
                panic!()
            };
            assert_eq!(map.len(), 64 * 64);
            let mut counts = [0usize; 4];
            for &c in map {
                counts[c] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), 64 * 64);
            assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        }
    }

    #[test]
    fn labels_cover_each_label_space() {
        let hc = HeadConfig::default();
        let c = cfg(32);
        let seen = |task: Task, n: usize| -> Vec<usize> {
            let ds = generate_dataset(task, n, 5, &c).unwrap();
            let mut v: Vec<usize> = ds
                .samples
                .iter()
                .map(|s| match s.label {
                    Label::Gender(k)
                    | Label::Race(k)
                    | Label::Expression(k)
                    | Label::Recognition(k) => k,
                    Label::Age(a) => hc.age_bin(a).unwrap(),
                    _ => unreachable!(),
                })
                .collect();
            v.sort();
            v.dedup();
            v
        };
        assert_eq!(seen(Task::Gender, 8), vec![0, 1]);
        assert_eq!(seen(Task::Race, 8), (0..hc.races).collect::<Vec<_>>());
        assert_eq!(
            seen(Task::Expression, 14),
            (0..hc.expressions).collect::<Vec<_>>()
        );
        assert_eq!(seen(Task::Age, 8), (0..hc.age_bins).collect::<Vec<_>>());
        assert_eq!(
            seen(Task::Recognition, 40),
            (0..hc.num_identities).collect::<Vec<_>>()
        );
        for task in [Task::Attributes, Task::Visibility] {
            let ds = generate_dataset(task, 8, 5, &c).unwrap();
            let bits: Vec<&Vec<f64>> = ds
                .samples
                .iter()
                .map(|s| match &s.label {
                    Label::Attributes(b) | Label::Visibility(b) => b,
                    _ => unreachable!(),
                })
                .collect();
            for k in 0..bits[0].len() {
                assert!(
                    bits.iter().any(|b| b[k] == 1.0) && bits.iter().any(|b| b[k] == 0.0),
                    "{task} bit {k}"
                );
            }
        }
    }

    #[test]
    fn recognition_identities_repeat_and_images_stay_in_range() {
        let ds = generate_dataset(Task::Recognition, 8, 1, &cfg(32)).unwrap();
        let ids: Vec<usize> = ds.samples.iter().map(|s| s.params.identity).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        let lm = generate_dataset(Task::Landmarks, 30, 2, &cfg(32)).unwrap();
        for s in &lm.samples {
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            let Label::Landmarks(p) = &s.label else {
                panic!()
            };
            assert!(p.iter().all(|v| (0.02..0.98).contains(v)));
            let iod = ((p[2 * RIGHT_EYE_OUTER] - p[2 * LEFT_EYE_OUTER]).powi(2)
                + (p[2 * RIGHT_EYE_OUTER + 1] - p[2 * LEFT_EYE_OUTER + 1]).powi(2))
            .sqrt();
            assert!(iod > 0.2);
        }
    }

    #[test]
    fn point_in_polygon_square() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(in_polygon((0.5, 0.5), &sq));
        assert!(!in_polygon((1.5, 0.5), &sq));
        assert!(!in_polygon((0.5, -0.1), &sq));
    }

    #[test]
    fn sampler_examples() {
        let mut s = BalancedSampler::new(&[(Task::Age, 3), (Task::Gender, 100)], 8, 1).unwrap();
        for _ in 0..50 {
            let b = s.next_batch();
            assert_eq!(b.iter().filter(|p| p.0 == Task::Age).count(), 4);
            assert_eq!(b.iter().filter(|p| p.0 == Task::Gender).count(), 4);
            assert!(b
                .iter()
                .all(|&(t, i)| i < if t == Task::Age { 3 } else { 100 }));
        }
        assert_eq!(s.batches_per_epoch(), 25);
        let mut one = BalancedSampler::new(&[(Task::Race, 5)], 8, 1).unwrap();
        assert!(one.next_batch().iter().all(|p| p.0 == Task::Race));
        assert!(BalancedSampler::new(&[(Task::Age, 3), (Task::Gender, 100)], 7, 1).is_err());
        assert!(BalancedSampler::new(&[(Task::Age, 3), (Task::Age, 3)], 8, 1).is_err());
    }

    #[test]
    fn small_datasets_are_cycled_without_repeats_within_a_pass() {
        let mut s = BalancedSampler::new(&[(Task::Age, 6), (Task::Race, 60)], 6, 3).unwrap();
        let mut seen = Vec::new();
        for _ in 0..2 {
            seen.extend(
                s.next_batch()
                    .into_iter()
                    .filter(|p| p.0 == Task::Age)
                    .map(|p| p.1),
            );
        }
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn batch_groups_follow_labels() {
        let c = cfg(32);
        let ds = vec![
            generate_dataset(Task::Age, 4, 1, &c).unwrap(),
            generate_dataset(Task::Gender, 4, 1, &c).unwrap(),
        ];
        let b = TaskBatch::collect(
            &ds,
            &[
                (Task::Age, 1),
                (Task::Age, 3),
                (Task::Gender, 0),
                (Task::Gender, 2),
            ],
        )
        .unwrap();
        assert_eq!(b.images.shape(), [4, 3, 32, 32]);
        assert_eq!(b.groups()[&Task::Gender], vec![2, 3]);
        assert_eq!(b.selection().get(Task::Age), Some(&[0usize, 1][..]));
        assert_eq!(
            &b.images.data()[3 * 32 * 32..2 * 3 * 32 * 32],
            ds[0].samples[3].image.as_slice()
        );
        assert!(TaskBatch::collect(&ds, &[(Task::Race, 0)]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn sampler_counts_are_equal_over_any_run(a in 1usize..50, b in 1usize..500, per in 1usize..6, seed in 0u64..100) {
            let mut s = BalancedSampler::new(&[(Task::Age, a), (Task::Gender, b)], 2 * per, seed).unwrap();
            let (mut na, mut nb) = (0, 0);
            for _ in 0..100 {
                for (t, _) in s.next_batch() {
                    if t == Task::Age { na += 1 } else { nb += 1 }
                }
            }
            proptest::prop_assert_eq!(na, nb);
        }
    }
}
