use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"seed = 4

[model]
image_height = 32
image_width = 32
encoder_channels = [8, 8, 16, 16]
d_t = 16
num_heads = 2
ffn_mult = 2

[model.head]
emb_dim = 8
num_identities = 4
heatmap_side = 4

[train]
max_steps = 3
batch_size = 10
lr = 1e-3

[data]
samples_per_task = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unifiedface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config(dir: &Path) -> String {
    let p = dir.join("toy.toml");
    std::fs::write(&p, TOY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[train]\nmomentum = 0.9\n").unwrap();
    let o = run(&["profile", "--flops-only", "--config", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn missing_config_fails() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn flops_report_is_deterministic_and_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let a = run(&["profile", "--flops-only", "--config", &cfg]);
    let b = run(&["profile", "--flops-only", "--config", &cfg]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("# FLOPs: multiply-add = 2"));

    let o = run(&[
        "profile",
        "--flops-only",
        "--jsonl",
        "--config",
        &cfg,
        "--ablation",
        "no-cross-attn",
    ]);
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let parts: u64 = lines
        .iter()
        .filter(|v| v["record"] == "flops_component")
        .map(|v| v["flops"].as_u64().unwrap())
        .sum();
    let total = lines.iter().find(|v| v["record"] == "flops_total").unwrap();
    assert_eq!(parts, total["flops"].as_u64().unwrap());
}

#[test]
fn profile_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = dir.path().join("prof");
    let o = run(&[
        "profile",
        "--config",
        &cfg,
        "--reps",
        "30",
        "--warmup",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("fps"));
    let text = std::fs::read_to_string(out.join("profile.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let total = lines
        .iter()
        .find(|v| v["record"] == "latency_total")
        .unwrap();
    let (med, p90) = (
        total["median_ms"].as_f64().unwrap(),
        total["p90_ms"].as_f64().unwrap(),
    );
    assert!(med <= p90);
    assert!((total["fps"].as_f64().unwrap() - 1000.0 / med).abs() < 1e-9);
    let env = lines.iter().find(|v| v["record"] == "environment").unwrap();
    assert_eq!(env["threads"], 1);

    let o = run(&["profile", "--config", &cfg, "--reps", "29"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("reps"));
}

#[test]
fn gradcheck_rejects_f32() {
    let o = run(&["gradcheck", "--mode", "f32"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_at_toy_dims() {
    let o = run(&["gradcheck", "--mode", "f64"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let s = stdout(&o);
    assert!(
        s.lines().filter(|l| l.contains(" pass ")).count() >= 12,
        "{s}"
    );
    assert!(!s.contains("FAIL"));
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = run(&["train", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.fxf", "log.tsv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("log.tsv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\ttotal\t")).count(), 3);

    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("again").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("again/log.tsv")).unwrap(),
        log
    );

    let o = run(&["eval", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("pixel_accuracy"));

    let ck = out.join("checkpoint.fxf");
    let o = run(&["inspect", ck.to_str().unwrap(), "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("version   1"));
    assert!(s.contains("config    matches"));
    assert!(s.contains("decoder.layer1.ftca"));

    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--ablation",
        "standard-cross-attn",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("digest"));

    let o = run(&["inspect", cfg.as_str()]);
    assert!(!o.status.success());
}
