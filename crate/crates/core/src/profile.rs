//! FLOPs accounting and latency benchmarking.
//!
//! FLOPs are analytic: every tape op adds a count derived from its shapes
//! (see [`crate::tensor::cost`]). Latency is host wall-clock for a forward
//! pass, split at the backbone / decoder / heads boundaries.
//!
//! Machine-readable output is one JSON object per line. Every object has a
//! `record` field naming its kind:
//!
//! | record              | fields                                              |
//! |---------------------|-----------------------------------------------------|
//! | `flops_component`   | `component`, `flops`                                |
//! | `flops_op`          | `component`, `op`, `flops`                          |
//! | `flops_total`       | `batch`, `image_height`, `image_width`, `flops`     |
//! | `latency_component` | `component`, `median_ms`, `p90_ms`                  |
//! | `latency_total`     | `median_ms`, `p90_ms`, `fps`, `reps`, `warmup`      |
//! | `environment`       | `os`, `arch`, `cpus`, `threads`, `precision`, `version`, `batch` |

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::Selection;
use crate::model::{Model, ModelConfig, StageTimes};
use crate::nn::{init_params, ParamRegistry};
use crate::rng::Rng;
use crate::task::Task;
use crate::tensor::{Component, Real, Tape, Tensor};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Counting convention printed above every text report.
pub const CONVENTION: &str = "FLOPs: multiply-add = 2; matmul [m,k]x[k,n] = 2mkn; conv = 2*Cout*Cin*kh*kw*Hout*Wout; \
     per element: elementwise 1, gelu 8, softmax 5, log_softmax 5, layer_norm 8, l2_normalize 3, bilinear 7, reduce 1; \
     so3 projection 300 per matrix";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub batch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub components: BTreeMap<Component, u64>,
    pub ops: BTreeMap<(Component, &'static str), u64>,
    pub total: u64,
}

impl FlopsReport {
    pub fn component(&self, c: Component) -> u64 {
        self.components.get(&c).copied().unwrap_or(0)
    }

    /// Total equals the sum of components, and each component equals the
    /// sum of its ops.
    pub fn check(&self) -> Result<()> {
        if self.components.values().sum::<u64>() != self.total {
            return Err(Error::invalid("flops: components do not sum to the total"));
        }
        for (&c, &f) in &self.components {
            let ops: u64 = self
                .ops
                .iter()
                .filter(|((oc, _), _)| *oc == c)
                .map(|(_, v)| v)
                .sum();
            if ops != f {
                return Err(Error::invalid(format!(
                    "flops: {} ops sum to {ops}, component says {f}",
                    c.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {CONVENTION}\n");
        s += &format!(
            "flops  batch={} input={}x{}\n",
            self.batch, self.image_height, self.image_width
        );
        for c in Component::MODEL {
            let f = self.component(c);
            s += &format!(
                "  {:<10} {:>16} ({:5.1}%)\n",
                c.name(),
                f,
                100.0 * f as f64 / self.total.max(1) as f64
            );
            for ((_, op), v) in self.ops.iter().filter(|((oc, _), _)| *oc == c) {
                s += &format!("    {op:<14} {v:>16}\n");
            }
        }
        s += &format!(
            "  {:<10} {:>16} ({:.4} GFLOPs)\n",
            "total",
            self.total,
            self.total as f64 * 1e-9
        );
        s
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = Component::MODEL
            .iter()
            .map(|&c| Record::FlopsComponent {
                component: c,
                flops: self.component(c),
            })
            .collect();
        out.extend(
            self.ops
                .iter()
                .map(|(&(component, op), &flops)| Record::FlopsOp {
                    component,
                    op,
                    flops,
                }),
        );
        out.push(Record::FlopsTotal {
            batch: self.batch,
            image_height: self.image_height,
            image_width: self.image_width,
            flops: self.total,
        });
        out
    }
}

/// One line of the machine-readable output.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    FlopsComponent {
        component: Component,
        flops: u64,
    },
    FlopsOp {
        component: Component,
        op: &'static str,
        flops: u64,
    },
    FlopsTotal {
        batch: usize,
        image_height: usize,
        image_width: usize,
        flops: u64,
    },
    LatencyComponent {
        component: Component,
        median_ms: f64,
        p90_ms: f64,
    },
    LatencyTotal {
        median_ms: f64,
        p90_ms: f64,
        fps: f64,
        reps: usize,
        warmup: usize,
    },
    Environment(Environment),
}

pub fn to_jsonl(records: &[Record]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Counts the forward FLOPs of `cfg` on a batch of `batch` images with
/// every head active. Parameter values do not affect the count.
pub fn count_flops(cfg: &ModelConfig, batch: usize) -> Result<FlopsReport> {
    if batch == 0 {
        return Err(Error::invalid("count_flops: batch must be positive"));
    }
    let mut reg = ParamRegistry::<f32>::new();
    let model = Model::new(&mut reg, *cfg)?;
    init_params(&mut reg, &mut Rng::new(0));
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[
        batch,
        3,
        cfg.image_height,
        cfg.image_width,
    ]));
    model.forward(&mut tape, &reg, x, &Selection::all(batch, &Task::ALL))?;
    let components: BTreeMap<Component, u64> = tape.flops_by_component().into_iter().collect();
    if components.keys().any(|c| !Component::MODEL.contains(c)) {
        return Err(Error::invalid(
            "count_flops: forward recorded ops outside backbone/decoder/heads",
        ));
    }
    let report = FlopsReport {
        batch,
        image_height: cfg.image_height,
        image_width: cfg.image_width,
        components,
        ops: tape.flops_by_op(),
        total: tape.total_flops(),
    };
    report.check()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl Stats {
    /// Median (mean of the middle pair for even counts) and nearest-rank
    /// 90th percentile.
    pub fn from_samples(samples: &[Duration]) -> Self {
        assert!(!samples.is_empty(), "no samples");
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        let rank = (9 * n).div_ceil(10).max(1);
        Self {
            median_ms: median,
            p90_ms: ms[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    /// Worker threads used by the ops. Always 1; there is no parallel mode.
    pub threads: usize,
    pub precision: &'static str,
    pub version: &'static str,
    pub batch: usize,
}

impl Environment {
    pub fn current(precision: &'static str, batch: usize) -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            threads: 1,
            precision,
            version: env!("CARGO_PKG_VERSION"),
            batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub batch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl BenchConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            batch: 1,
            image_height: cfg.image_height,
            image_width: cfg.image_width,
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub reps: usize,
    pub warmup: usize,
    pub components: BTreeMap<Component, Stats>,
    pub total: Stats,
    /// Forward passes per second, `1000 / total.median_ms`.
    pub fps: f64,
    pub environment: Environment,
}

impl LatencyReport {
    /// Sum of the component medians.
    pub fn component_median_sum(&self) -> f64 {
        self.components.values().map(|s| s.median_ms).sum()
    }

    pub fn to_text(&self) -> String {
        let e = &self.environment;
        let mut s = format!(
            "latency  reps={} warmup={} batch={} precision={} threads={} ({} {} cpus={})\n",
            self.reps, self.warmup, e.batch, e.precision, e.threads, e.os, e.arch, e.cpus
        );
        s += &format!(
            "  {:<10} {:>10} {:>10}\n",
            "component", "median ms", "p90 ms"
        );
        for (c, st) in &self.components {
            s += &format!(
                "  {:<10} {:>10.3} {:>10.3}\n",
                c.name(),
                st.median_ms,
                st.p90_ms
            );
        }
        s += &format!(
            "  {:<10} {:>10.3} {:>10.3}\n",
            "total", self.total.median_ms, self.total.p90_ms
        );
        s += &format!("  fps {:.2}\n", self.fps);
        s
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self
            .components
            .iter()
            .map(|(&component, st)| Record::LatencyComponent {
                component,
                median_ms: st.median_ms,
                p90_ms: st.p90_ms,
            })
            .collect();
        out.push(Record::LatencyTotal {
            median_ms: self.total.median_ms,
            p90_ms: self.total.p90_ms,
            fps: self.fps,
            reps: self.reps,
            warmup: self.warmup,
        });
        out.push(Record::Environment(self.environment.clone()));
        out
    }
}

/// Times `bench.reps` forward passes after `bench.warmup` untimed ones.
pub fn bench_latency<T: Real>(
    model: &Model,
    reg: &ParamRegistry<T>,
    bench: &BenchConfig,
) -> Result<LatencyReport> {
    if bench.reps < MIN_REPS || bench.warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "latency needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}, got {} and {}",
            bench.reps, bench.warmup
        )));
    }
    if bench.batch == 0 {
        return Err(Error::Config("latency batch must be positive".into()));
    }
    if (bench.image_height, bench.image_width) != (model.cfg.image_height, model.cfg.image_width) {
        return Err(Error::Config(format!(
            "input {}x{} does not match the model's {}x{}",
            bench.image_height, bench.image_width, model.cfg.image_height, model.cfg.image_width
        )));
    }
    let shape = [bench.batch, 3, bench.image_height, bench.image_width];
    let mut rng = Rng::new(0);
    let pixels = Tensor::<T>::from_f64(
        &shape,
        &(0..shape.iter().product::<usize>())
            .map(|_| rng.uniform())
            .collect::<Vec<_>>(),
    )?;
    let sel = Selection::all(bench.batch, &Task::ALL);
    let mut stages = Vec::with_capacity(bench.reps);
    let mut totals = Vec::with_capacity(bench.reps);
    for i in 0..bench.warmup + bench.reps {
        let mut times = StageTimes::default();
        let start = Instant::now();
        let mut tape = Tape::<T>::new();
        let x = tape.leaf(pixels.clone());
        let out = model.forward_timed(&mut tape, reg, x, &sel, &mut times)?;
        std::hint::black_box(tape.value(out.task_tokens));
        let total = start.elapsed();
        drop(tape);
        if i >= bench.warmup {
            stages.push(times);
            totals.push(total);
        }
    }
    let components = Component::MODEL
        .iter()
        .map(|&c| {
            (
                c,
                Stats::from_samples(&stages.iter().map(|t| t.get(c)).collect::<Vec<_>>()),
            )
        })
        .collect();
    let total = Stats::from_samples(&totals);
    Ok(LatencyReport {
        reps: bench.reps,
        warmup: bench.warmup,
        components,
        total,
        fps: 1000.0 / total.median_ms,
        environment: Environment::current(T::NAME, bench.batch),
    })
}
