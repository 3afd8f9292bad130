use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dash_core::policy::{load_checkpoint, PolicyParams};
use dash_core::sampler::bench_sampler;
use dash_core::trainer::{
    evaluate_run, init_params, train_rl, train_sft, EvalRecord, RunConfig, CHECKPOINT_DIR, CONFIG_FILE,
};

#[derive(Parser)]
#[command(name = "dash", version, about = "On-policy RL and SFT for small transformer policies on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with on-policy RL.
    TrainRl(Common),
    /// Train on expert traces.
    TrainSft(Common),
    /// Evaluate a checkpoint on both evaluation splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to <out>/checkpoints/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare preemptive and interleaved sampling.
    BenchSampler {
        #[command(flatten)]
        common: Common,
        /// Policy to sample from; defaults to the initial policy of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `update.beta=0.04`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run seed; replaces `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn load_params(path: &Path, cfg: &RunConfig) -> Result<PolicyParams> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let task = cfg.task_spec()?;
    if let Some(vocab) = &ckpt.vocab {
        if vocab.as_slice() != task.vocab().tokens() {
            bail!("checkpoint vocabulary does not match task `{}`", cfg.task.kind);
        }
    }
    Ok(ckpt.params)
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn print_eval(record: &EvalRecord) {
    let ks: Vec<String> = record.in_dist.k_list.iter().map(|k| format!("pass@{k}")).collect();
    println!(
        "{:<10} {:>10} {:>9} {:>9} {}",
        "split",
        "difficulty",
        "accuracy",
        "length",
        ks.iter().map(|k| format!("{k:>8}")).collect::<String>()
    );
    for (name, r) in [("in-dist", &record.in_dist), ("held-out", &record.heldout)] {
        let pass: String = r.pass_at_k.iter().map(|p| format!("{p:>8.4}")).collect();
        println!("{name:<10} {:>10} {:>9.4} {:>9.2} {pass}", r.difficulty, r.accuracy, r.mean_length);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainRl(common) => {
            let cfg = common.resolve()?;
            let outcome = train_rl(&cfg, Some(&common.out))?;
            if let Some(last) = outcome.evals.last() {
                print_eval(last);
            }
            println!("wrote {}", common.out.display());
        }
        Command::TrainSft(common) => {
            let cfg = common.resolve()?;
            let outcome = train_sft(&cfg, Some(&common.out))?;
            if let Some(last) = outcome.evals.last() {
                print_eval(last);
            }
            println!("wrote {}", common.out.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let path = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_DIR).join("final.ckpt"));
            let params = load_params(&path, &cfg)?;
            let record = evaluate_run(&cfg, &params)?;
            write_config(&common.out, &cfg)?;
            let mut f = fs::File::create(common.out.join("eval.json"))?;
            serde_json::to_writer_pretty(&mut f, &record)?;
            writeln!(f)?;
            print_eval(&record);
        }
        Command::BenchSampler { common, checkpoint } => {
            let cfg = common.resolve()?;
            let params = match checkpoint {
                Some(p) => load_params(&p, &cfg)?,
                None => init_params(&cfg)?,
            };
            let report = bench_sampler(
                &cfg.sampling,
                &cfg.latency,
                cfg.update.filter_tau,
                &cfg.bench,
                Arc::new(params),
                Arc::new(cfg.task_spec()?),
            )?;
            write_config(&common.out, &cfg)?;
            let mut rounds = fs::File::create(common.out.join("bench-rounds.jsonl"))?;
            for r in &report.rounds {
                serde_json::to_writer(&mut rounds, r)?;
                writeln!(rounds)?;
            }
            let mut f = fs::File::create(common.out.join("bench.json"))?;
            serde_json::to_writer_pretty(&mut f, &report)?;
            writeln!(f)?;
            println!(
                "modeled sampling: preemptive {:.3}s, interleaved {:.3}s, ratio {:.3}, speedup {:.2}x",
                report.preemptive_model_secs, report.interleaved_model_secs, report.ratio, report.speedup
            );
            println!(
                "loss computation: filtered {:.4}s, unfiltered {:.4}s",
                report.loss_secs_filtered, report.loss_secs_unfiltered
            );
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
