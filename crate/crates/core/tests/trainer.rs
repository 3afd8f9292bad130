use dash_core::sampler::SamplingMode;
use dash_core::tasks::{instance_pool, Split, TaskKind, TaskSpec, Verbosity};
use dash_core::trainer::{
    evaluate, pass_at_k, train_rl, train_sft, EvalConfig, RunConfig, CONFIG_FILE, EVALS_FILE, METRICS_CSV,
    METRICS_FILE, PRESETS, TIMINGS_FILE,
};
use dash_core::updates::Schedule;
use dash_core::Error;

fn overrides(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// A run small enough for a unit-test budget.
fn tiny(extra: &[&str]) -> RunConfig {
    let mut o = overrides(&[
        "task.train_pool=32",
        "task.eval_size=6",
        "sampling.prompts=8",
        "sampling.group_size=4",
        "train.max_rounds=3",
        "eval.every=2",
        "eval.n_samples=4",
        "eval.k_list=[1, 4]",
        "model.embed_dim=8",
        "model.n_heads=2",
        "model.ff_dim=16",
        "model.n_layers=1",
    ]);
    o.extend(overrides(extra));
    RunConfig::resolve(None, &o).unwrap()
}

#[test]
fn resolution_order_is_defaults_preset_file_overrides() {
    let file = "preset = \"mini\"\n[update]\nk_steps = 2\nlr = 0.01\n";
    let cfg = RunConfig::resolve(Some(file), &overrides(&["update.lr=0.02", "sampling.mode=interleaved"])).unwrap();
    assert_eq!(cfg.update.schedule, Schedule::Mini);
    assert_eq!(cfg.update.k_steps, 2);
    assert_eq!(cfg.update.lr, 0.02);
    assert_eq!(cfg.sampling.mode, SamplingMode::Interleaved);
    assert_eq!(cfg.update.beta, 0.0);

    let cfg = RunConfig::resolve(Some(file), &overrides(&["preset=multi"])).unwrap();
    assert_eq!(cfg.update.schedule, Schedule::Multi);
    assert_eq!(cfg.update.k_steps, 2);
}

#[test]
fn presets_resolve() {
    for p in PRESETS {
        let cfg = RunConfig::resolve(None, &[format!("preset={p}")]).unwrap();
        cfg.validate().unwrap();
    }
    let base = RunConfig::resolve(None, &overrides(&["preset=grpo-baseline"])).unwrap();
    assert_eq!(base.sampling.mode, SamplingMode::Interleaved);
    assert!(!base.update.filter);
    assert_eq!(RunConfig::resolve(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn bad_keys_and_values_name_the_key() {
    let cases = [
        (vec!["update.lrr=0.1"], "update.lrr"),
        (vec!["update.lr=fast"], "update.lr"),
        (vec!["update.lr=-1"], "update.lr"),
        (vec!["sampling=3"], "sampling"),
        (vec!["preset=nope"], "preset"),
        (vec!["lr"], "lr"),
    ];
    for (o, key) in cases {
        match RunConfig::resolve(None, &overrides(&o)) {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{o:?}"),
            other => panic!("{o:?}: {other:?}"),
        }
    }
    match RunConfig::resolve(Some("[update]\nbogus = 1\n"), &[]) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "update.bogus"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let cfg = tiny(&["update.beta=0.05", "seed=9"]);
    let again = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), &[]).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn rounds_follow_epochs_and_cap() {
    let cfg = RunConfig::resolve(None, &overrides(&["task.train_pool=100", "sampling.prompts=30", "train.epochs=2.0"]))
        .unwrap();
    assert_eq!(cfg.rounds(), 7);
    let cfg = RunConfig::resolve(None, &overrides(&["train.max_rounds=5"])).unwrap();
    assert_eq!(cfg.rounds(), 5);
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let out = train_rl(&cfg, Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert_eq!(out.evals.iter().map(|e| e.at).collect::<Vec<_>>(), vec![0, 2, 3]);
    for name in [CONFIG_FILE, METRICS_FILE, METRICS_CSV, TIMINGS_FILE, EVALS_FILE, "checkpoints/final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("round,epoch,samples,mean_reward"));
    assert!(header.ends_with("pass_at_1,pass_at_4"));
    assert_eq!(csv.lines().count(), 4);
    let saved = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(RunConfig::resolve(Some(&saved), &[]).unwrap(), cfg);
}

#[test]
fn streaming_and_interleaved_runs_match_barrier_runs() {
    let barrier = train_rl(&tiny(&[]), None).unwrap();
    let streaming = train_rl(&tiny(&["sampling.streaming=true"]), None).unwrap();
    assert_eq!(streaming.params.as_slice(), barrier.params.as_slice());
    let interleaved = train_rl(&tiny(&["sampling.mode=interleaved"]), None).unwrap();
    assert_eq!(interleaved.params.as_slice(), barrier.params.as_slice());
    for (a, b) in interleaved.metrics.iter().zip(&barrier.metrics) {
        assert_eq!(a.mean_reward, b.mean_reward);
    }
}

#[test]
fn kl_is_logged_only_with_positive_beta() {
    let off = train_rl(&tiny(&[]), None).unwrap();
    assert!(off.metrics.iter().all(|m| m.kl == 0.0));
    let on = train_rl(
        &tiny(&[
            "task.kind=micro",
            "sampling.max_len=2",
            "sampling.group_size=8",
            "train.max_rounds=6",
            "update.beta=0.1",
        ]),
        None,
    )
    .unwrap();
    assert_eq!(on.metrics[0].kl, 0.0);
    // KL is measured before each update, so it turns positive the round after the first move
    let moved = on.metrics.iter().position(|m| m.mean_abs_adv > 0.0).expect("some round has signal");
    assert!(moved + 1 < on.metrics.len());
    assert!(on.metrics[moved + 1..].iter().all(|m| m.kl > 0.0));
}

#[test]
fn schedules_take_the_configured_number_of_updates() {
    for (preset, k) in [("dash", 1), ("multi", 4), ("mini", 4)] {
        let out = train_rl(&tiny(&[&format!("preset={preset}")]), None).unwrap();
        assert!(out.metrics.iter().all(|m| m.updates == k), "{preset}");
    }
}

#[test]
fn sft_raises_expert_likelihood() {
    let cfg = tiny(&["task.kind=parity", "sft.epochs=3", "update.lr=0.01"]);
    assert_eq!(cfg.sft.verbosity, Verbosity::Stepwise);
    let out = train_sft(&cfg, None).unwrap();
    let ll: Vec<f64> = out.metrics.iter().map(|m| m.train_log_likelihood).collect();
    assert!(ll.windows(2).all(|w| w[1] > w[0]), "{ll:?}");
}

#[test]
fn evaluation_of_a_constant_policy() {
    let cfg = tiny(&[]);
    let params = dash_core::trainer::init_params(&cfg).unwrap();
    let task = TaskSpec::new(TaskKind::Add, 1).unwrap();
    let instances = instance_pool(&task, Split::Eval, 0, 5);
    let eval_cfg = EvalConfig { n_samples: 4, k_list: vec![1, 2, 4], ..EvalConfig::default() };
    let r = evaluate(&params, &task, &instances, &eval_cfg, 3, 0).unwrap();
    assert_eq!(r.instances, 5);
    assert!(r.pass_at_k.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.mean_length <= 3.0 && r.greedy_mean_length <= 3.0);
    assert_eq!(r, evaluate(&params, &task, &instances, &eval_cfg, 3, 0).unwrap());
}

#[test]
fn pass_at_k_edges() {
    assert_eq!(pass_at_k(5, 0, 3).unwrap(), 0.0);
    assert_eq!(pass_at_k(5, 5, 1).unwrap(), 1.0);
    assert_eq!(pass_at_k(5, 3, 3).unwrap(), 1.0);
    assert!((pass_at_k(4, 1, 1).unwrap() - 0.25).abs() < 1e-15);
    assert!((pass_at_k(4, 1, 2).unwrap() - 0.5).abs() < 1e-15);
    assert!(pass_at_k(3, 4, 1).is_err());
    assert!(pass_at_k(3, 1, 0).is_err());
    assert!(pass_at_k(3, 1, 4).is_err());
}
