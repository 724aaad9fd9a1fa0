use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use unifiedface::checkpoint;
use unifiedface::checks;
use unifiedface::config::{hex, RunConfig};
use unifiedface::decoder::AblationMode;
use unifiedface::eval::evaluate;
use unifiedface::model::{Model, ModelConfig};
use unifiedface::nn::ParamRegistry;
use unifiedface::profile::{self, BenchConfig};
use unifiedface::tensor::Real;
use unifiedface::train::Trainer;
use unifiedface::{Error, Result};

#[derive(Parser)]
#[command(
    name = "unifiedface",
    version,
    about = "Train, evaluate and profile the multi-task face model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Mode::F32)]
    mode: Mode,
    #[arg(long, global = true, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic suite; writes checkpoint.fxf, log.tsv and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on freshly generated synthetic data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.fxf`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate on the training samples instead of a held-out draw.
        #[arg(long)]
        train_set: bool,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Report FLOPs and forward latency; writes `<out>/profile.jsonl` when --out is given.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = profile::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = profile::MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Print the line-delimited records instead of the text report.
        #[arg(long)]
        jsonl: bool,
        /// Skip the latency benchmark.
        #[arg(long)]
        flops_only: bool,
    },
    /// Finite-difference gradient checks of every module in 64-bit mode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Print checkpoint metadata.
    Inspect {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoCrossAttn,
    StandardCrossAttn,
    Bidirectional,
}

impl From<Ablation> for AblationMode {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::NoCrossAttn => AblationMode::NoCrossAttn,
            Ablation::StandardCrossAttn => AblationMode::StandardCrossAttn,
            Ablation::Bidirectional => AblationMode::Bidirectional,
        }
    }
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(a) = self.ablation {
            cfg.model.ablation = a.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.run_config()?;
            match common.mode {
                Mode::F32 => train::<f32>(&cfg),
                Mode::F64 => train::<f64>(&cfg),
            }?;
        }
        Command::Eval {
            common,
            checkpoint,
            train_set,
            batch,
        } => {
            let cfg = common.run_config()?;
            let path = checkpoint.unwrap_or_else(|| cfg.paths.out.join("checkpoint.fxf"));
            match common.mode {
                Mode::F32 => eval::<f32>(&cfg, &path, train_set, batch),
                Mode::F64 => eval::<f64>(&cfg, &path, train_set, batch),
            }?;
        }
        Command::Profile {
            common,
            checkpoint,
            reps,
            warmup,
            batch,
            jsonl,
            flops_only,
        } => {
            let cfg = common.run_config()?;
            let bench = BenchConfig {
                batch,
                reps,
                warmup,
                ..BenchConfig::for_model(&cfg.model)
            };
            let out = common.out.is_some().then(|| cfg.paths.out.clone());
            let opts = ProfileOptions {
                checkpoint: checkpoint.as_deref(),
                out: out.as_deref(),
                jsonl,
                flops_only,
            };
            match common.mode {
                Mode::F32 => profile::<f32>(&cfg, &bench, &opts),
                Mode::F64 => profile::<f64>(&cfg, &bench, &opts),
            }?;
        }
        Command::Gradcheck { common } => {
            if common.mode == Mode::F32 {
                return Err(Error::Config("gradcheck runs in f64 only".into()));
            }
            let model = match &common.config {
                Some(_) => common.run_config()?.model,
                None => ModelConfig::toy(),
            };
            return gradcheck(&model);
        }
        Command::Inspect { common, path } => inspect(&common, &path)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn build<T: Real>(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<(Model, ParamRegistry<T>)> {
    let mut reg = ParamRegistry::new();
    let model = Model::new(&mut reg, cfg.model)?;
    match ckpt {
        Some(p) => checkpoint::load(p, &mut reg, cfg.digest())?,
        None => unifiedface::nn::init_params(&mut reg, &mut unifiedface::rng::Rng::new(cfg.seed)),
    }
    Ok((model, reg))
}

fn train<T: Real>(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.out;
    std::fs::create_dir_all(out)?;
    let data = cfg.datasets(cfg.seed)?;
    let mut trainer = Trainer::<T>::new(
        cfg.model,
        cfg.seed,
        cfg.weights,
        cfg.loss,
        cfg.train.weight_decay,
    )?;
    let start = Instant::now();
    let log = trainer.train(&data, &cfg.train, cfg.seed)?;
    std::fs::write(out.join("log.tsv"), log.to_tsv())?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    checkpoint::save(&out.join("checkpoint.fxf"), &trainer.reg, cfg.digest())?;
    let totals = log.totals();
    println!(
        "trained {} steps in {:.1}s; loss {:.4} -> {:.4}; wrote {}",
        totals.len(),
        start.elapsed().as_secs_f64(),
        totals.first().copied().unwrap_or(f64::NAN),
        totals.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn eval<T: Real>(cfg: &RunConfig, ckpt: &Path, train_set: bool, batch: usize) -> Result<()> {
    let (model, reg) = build::<T>(cfg, Some(ckpt))?;
    let seed = if train_set {
        cfg.seed
    } else {
        cfg.seed.wrapping_add(1)
    };
    let report = evaluate(&model, &reg, &cfg.datasets(seed)?, batch)?;
    print!("{}", report.to_table());
    Ok(())
}

struct ProfileOptions<'a> {
    checkpoint: Option<&'a Path>,
    out: Option<&'a Path>,
    jsonl: bool,
    flops_only: bool,
}

fn profile<T: Real>(cfg: &RunConfig, bench: &BenchConfig, opts: &ProfileOptions) -> Result<()> {
    let flops = profile::count_flops(&cfg.model, bench.batch)?;
    let mut records = flops.records();
    let mut text = flops.to_text();
    if !opts.flops_only {
        let (model, reg) = build::<T>(cfg, opts.checkpoint)?;
        let latency = profile::bench_latency(&model, &reg, bench)?;
        records.extend(latency.records());
        text += &latency.to_text();
    }
    let lines = profile::to_jsonl(&records);
    if let Some(dir) = opts.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("profile.jsonl"), &lines)?;
    }
    print!("{}", if opts.jsonl { &lines } else { &text });
    Ok(())
}

fn gradcheck(model: &ModelConfig) -> Result<ExitCode> {
    let start = Instant::now();
    let results = checks::run_suite(model)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<22} {}  worst rel err {:.3e}",
            r.module,
            if r.passed() { "pass" } else { "FAIL" },
            r.worst
        );
    }
    println!(
        "{} modules in {:.1}s, tolerance {:.0e}",
        results.len(),
        start.elapsed().as_secs_f64(),
        checks::TOLERANCE
    );
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn inspect(common: &Common, path: &Path) -> Result<()> {
    let ck = checkpoint::read(path)?;
    println!("file      {}", path.display());
    println!("version   {}", ck.version);
    println!("digest    {}", hex(&ck.digest));
    println!("tensors   {}", ck.records.len());
    println!("scalars   {}", ck.num_scalars());
    if common.config.is_some() {
        let cfg = common.run_config()?;
        let matches = cfg.digest() == ck.digest;
        println!(
            "config    {}",
            if matches { "matches" } else { "does not match" }
        );
    }
    for r in &ck.records {
        println!("  {:<48} {:?}", r.name, r.shape);
    }
    Ok(())
}
