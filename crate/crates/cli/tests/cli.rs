use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "task.train_pool=16",
    "task.eval_size=4",
    "sampling.prompts=4",
    "sampling.group_size=4",
    "train.max_rounds=2",
    "eval.n_samples=4",
    "eval.k_list=[1, 2]",
    "model.embed_dim=8",
    "model.n_heads=2",
    "model.ff_dim=16",
    "model.n_layers=1",
    "sft.epochs=1",
    "bench.rounds=1",
];

fn dash(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dash"));
    c.arg(cmd).arg("--out").arg(out);
    for o in TINY {
        c.arg("--override").arg(o);
    }
    c.args(extra);
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&dash("train-rl", dir.path(), &["--seed", "5", "--override", "update.beta=0.02"]));
    assert!(text.contains("in-dist") && text.contains("held-out") && text.contains("pass@2"), "{text}");
    for name in ["resolved-config.toml", "metrics.jsonl", "metrics.csv", "evals.jsonl", "checkpoints/final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let config = std::fs::read_to_string(dir.path().join("resolved-config.toml")).unwrap();
    assert!(config.contains("seed = 5"), "{config}");
    assert!(config.contains("beta = 0.02"), "{config}");
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(), 2);

    let text = stdout(&dash("eval", dir.path(), &["--seed", "5"]));
    assert!(text.lines().count() == 3, "{text}");
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn eval_with_config_file_and_explicit_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&dash("train-sft", dir.path(), &["--override", "task.kind=parity"]));
    let cfg = dir.path().join("resolved-config.toml");
    let ckpt = dir.path().join("checkpoints/final.ckpt");
    let other = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dash"))
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(other.path())
        .output()
        .unwrap();
    stdout(&out);

    // a checkpoint of another task's vocabulary is refused
    let out = dash("eval", other.path(), &["--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}

#[test]
fn bench_sampler_under_flat_model_with_one_worker_is_even() {
    let dir = tempfile::tempdir().unwrap();
    let flat = [
        "--override",
        "latency.discount=flat",
        "--override",
        "latency.call_overhead_secs=0.0",
        "--override",
        "sampling.workers=1",
    ];
    let text = stdout(&dash("bench-sampler", dir.path(), &flat));
    assert!(text.contains("ratio 1.000"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!((report["ratio"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(std::fs::read_to_string(dir.path().join("bench-rounds.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn bench_sampler_records_speedup_under_the_default_latency_model() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&dash("bench-sampler", dir.path(), &["--override", "sampling.prompts=256"]));
    assert!(text.contains("speedup"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    let (ratio, speedup) = (report["ratio"].as_f64().unwrap(), report["speedup"].as_f64().unwrap());
    assert!(speedup >= 2.0, "{speedup}");
    assert!((speedup * ratio - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_override_fails_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dash("train-rl", dir.path(), &["--override", "update.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("update.nope") && err.contains("unknown key"), "{err}");
}
