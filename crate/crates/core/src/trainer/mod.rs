//! Training loops, evaluation and metrics.

mod artifacts;
mod config;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    filter_by_threshold, group_advantage, leave_one_out, normalize_std, single_path_advantage, AdvantageBatch,
};
use crate::error::{input, Result};
use crate::policy::{greedy, sample, PolicyParams, Trajectory};
use crate::rng::{derive_seed, rng_from};
use crate::sampler::{
    batch_from_groups, drain, interleaved_sample, preemptive_sample, start_round, verify_snapshot, CallRecord,
    SamplingMode, SamplingPlan,
};
use crate::tasks::{expert_trajectory, instance_pool, reward, ProblemInstance, Split, TaskSpec};
use crate::updates::{
    mean_log_likelihood, optimizer_step, run_schedule, sft_gradient, AdvantageKind, OptimizerState, RolloutBatch,
    UpdateConfig,
};

pub use artifacts::{Artifacts, CHECKPOINT_DIR, CONFIG_FILE, EVALS_FILE, METRICS_CSV, METRICS_FILE, TIMINGS_FILE};
pub use config::{EvalConfig, ModelConfig, RunConfig, SftConfig, TaskConfig, TrainConfig, PRESETS};

/// Unbiased pass@k from `c` correct among `n` samples:
/// `1 - C(n-c, k) / C(n, k)`, as `1 - Π_{i=n-c+1..n} (1 - k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return input(format!("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let prod: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - prod)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub difficulty: usize,
    pub instances: usize,
    /// Greedy-decoding accuracy.
    pub accuracy: f64,
    pub k_list: Vec<usize>,
    /// Mean pass@k over instances, aligned with `k_list`.
    pub pass_at_k: Vec<f64>,
    /// Mean completion length of the sampled completions.
    pub mean_length: f64,
    pub greedy_mean_length: f64,
}

struct InstanceEval {
    greedy_correct: f64,
    greedy_len: usize,
    correct: usize,
    sampled_len: usize,
}

/// Greedy accuracy plus pass@k from `cfg.n_samples` completions per instance
/// at `cfg.temperature`. Sample seeds derive from `seed` and the instance seed.
pub fn evaluate(
    params: &PolicyParams,
    task: &TaskSpec,
    instances: &[ProblemInstance],
    cfg: &EvalConfig,
    max_len: usize,
    seed: u64,
) -> Result<EvalResult> {
    if let Some(&k) = cfg.k_list.iter().find(|&&k| k == 0 || k > cfg.n_samples) {
        return input(format!("k={k} needs 1 <= k <= n_samples ({})", cfg.n_samples));
    }
    let eos = task.vocab().eos();
    let per: Vec<InstanceEval> = instances
        .par_iter()
        .map(|inst| -> Result<InstanceEval> {
            let g = greedy(params, inst.prompt_tokens(), max_len, eos)?;
            let mut correct = 0;
            let mut sampled_len = 0;
            for j in 0..cfg.n_samples {
                let s = derive_seed(seed, &[inst.seed, j as u64]);
                let t = sample(params, inst.prompt_tokens(), max_len, cfg.temperature, eos, s)?;
                correct += (reward(task, inst, &t) > 0.0) as usize;
                sampled_len += t.len();
            }
            Ok(InstanceEval { greedy_correct: reward(task, inst, &g), greedy_len: g.len(), correct, sampled_len })
        })
        .collect::<Result<_>>()?;
    let n = instances.len().max(1) as f64;
    let mut pass = vec![0.0; cfg.k_list.len()];
    for e in &per {
        for (p, &k) in pass.iter_mut().zip(&cfg.k_list) {
            *p += pass_at_k(cfg.n_samples, e.correct, k)?;
        }
    }
    Ok(EvalResult {
        difficulty: task.difficulty(),
        instances: instances.len(),
        accuracy: per.iter().map(|e| e.greedy_correct).sum::<f64>() / n,
        k_list: cfg.k_list.clone(),
        pass_at_k: pass.into_iter().map(|p| p / n).collect(),
        mean_length: per.iter().map(|e| e.sampled_len as f64).sum::<f64>() / (n * cfg.n_samples.max(1) as f64),
        greedy_mean_length: per.iter().map(|e| e.greedy_len as f64).sum::<f64>() / n,
    })
}

/// Evaluations on the training difficulty and on the held-out difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Round (RL) or epoch (SFT) after which the evaluation ran; 0 is before training.
    pub at: usize,
    pub in_dist: EvalResult,
    pub heldout: EvalResult,
}

/// One RL round. Contains no wall-clock values, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub epoch: usize,
    pub samples: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub mean_abs_adv: f64,
    pub filtered_fraction: f64,
    pub kept: usize,
    pub updates: usize,
    /// Surrogate objective of the first update.
    pub objective: f64,
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    /// Sampling time under the configured latency model.
    pub sampling_model_secs: f64,
    pub eval: Option<EvalRecord>,
}

/// Wall-clock breakdown of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: usize,
    pub samples: usize,
    pub generation_calls: usize,
    pub filtered_fraction: f64,
    pub sampling_secs: f64,
    pub loss_secs: f64,
    pub eval_secs: f64,
    pub round_secs: f64,
}

/// One SFT epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-sequence log-likelihood of the expert traces after the epoch.
    pub train_log_likelihood: f64,
    pub grad_norm: f64,
    pub eval: Option<EvalRecord>,
}

pub struct RlOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    pub evals: Vec<EvalRecord>,
}

pub struct SftOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<SftRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Seed paths under the run seed.
mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ROUND: u64 = 3;
    pub const VERIFY: u64 = 4;
    pub const EVAL: u64 = 5;
}

struct EvalSets {
    task: TaskSpec,
    heldout: TaskSpec,
    in_dist: Vec<ProblemInstance>,
    heldout_set: Vec<ProblemInstance>,
}

impl EvalSets {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let task = cfg.task_spec()?;
        let heldout = cfg.heldout_spec()?;
        let in_dist = instance_pool(&task, Split::Eval, 0, cfg.task.eval_size);
        let heldout_set = instance_pool(&heldout, Split::Eval, 0, cfg.task.eval_size);
        Ok(Self { task, heldout, in_dist, heldout_set })
    }

    fn run(&self, cfg: &RunConfig, params: &PolicyParams, at: usize) -> Result<EvalRecord> {
        let seed = derive_seed(cfg.seed, &[stream::EVAL]);
        let cap = |t: &TaskSpec| eval_cap(&cfg.sampling, &self.task, t);
        Ok(EvalRecord {
            at,
            in_dist: evaluate(params, &self.task, &self.in_dist, &cfg.eval, cap(&self.task), seed)?,
            heldout: evaluate(params, &self.heldout, &self.heldout_set, &cfg.eval, cap(&self.heldout), seed)?,
        })
    }
}

/// Completion cap for evaluating on `split`: the sampling cap, widened by
/// how much longer `split` completions can be than training ones.
fn eval_cap(plan: &SamplingPlan, train: &TaskSpec, split: &TaskSpec) -> usize {
    let extra = split.max_completion_len().saturating_sub(train.max_completion_len());
    plan.completion_cap(train) + extra
}

fn due(every: usize, done: usize, total: usize) -> bool {
    done == total || (every > 0 && done.is_multiple_of(every))
}

/// Initial parameters for a run.
pub fn init_params(cfg: &RunConfig) -> Result<PolicyParams> {
    PolicyParams::init(cfg.architecture()?, derive_seed(cfg.seed, &[stream::INIT]), cfg.model.init_std)
}

/// Training prompts for `round`: consecutive slices of a per-epoch shuffle
/// of the pool.
fn round_instances(cfg: &RunConfig, pool: &[ProblemInstance], round: usize) -> (usize, Vec<ProblemInstance>) {
    let m = cfg.sampling.prompts;
    let mut orders: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let global = round * m + j;
        let (epoch, pos) = (global / pool.len(), global % pool.len());
        if orders.last().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
            orders.push((epoch, order));
        }
        out.push(pool[orders.last().expect("pushed above").1[pos]].clone());
    }
    ((round * m) / pool.len(), out)
}

fn sample_round(
    plan: &SamplingPlan,
    cfg: &RunConfig,
    snapshot: &Arc<PolicyParams>,
    task: &Arc<TaskSpec>,
    instances: Vec<ProblemInstance>,
) -> Result<(RolloutBatch, Vec<Vec<CallRecord>>)> {
    match (plan.mode, plan.streaming) {
        (SamplingMode::Preemptive, false) => {
            let out = preemptive_sample(plan, snapshot.clone(), task.clone(), Arc::new(instances))?;
            Ok((drain(out.cache)?, out.calls))
        }
        (SamplingMode::Preemptive, true) => {
            let round = start_round(plan, snapshot.clone(), task.clone(), Arc::new(instances), cfg.train.strict_serve)?;
            let mut groups = Vec::with_capacity(plan.prompts);
            let mut failed = None;
            for m in 0..plan.prompts {
                match round.cache().wait_group(m) {
                    Ok(g) => groups.push(g),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            let out = round.join()?;
            if let Some(e) = failed {
                return Err(e.into());
            }
            out.cache.close()?;
            Ok((batch_from_groups(groups, snapshot.fingerprint())?, out.calls))
        }
        (SamplingMode::Interleaved, _) => {
            let per_call = plan.micro_batch / plan.group_size;
            let mut groups = Vec::with_capacity(plan.prompts);
            let mut calls = Vec::new();
            for (c, chunk) in instances.chunks(per_call).enumerate() {
                let (g, call) = interleaved_sample(plan, snapshot, task, chunk, c * per_call)?;
                groups.extend(g);
                calls.push(call);
            }
            Ok((batch_from_groups(groups, snapshot.fingerprint())?, vec![calls]))
        }
    }
}

/// Advantages for `batch` as configured, filtered when `cfg.filter` is on.
pub fn compute_advantages(batch: &RolloutBatch, cfg: &UpdateConfig) -> Result<AdvantageBatch> {
    let rewards = batch.rewards();
    let mut adv = match (cfg.advantage, cfg.leave_one_out) {
        (AdvantageKind::SinglePath, _) => single_path_advantage(&rewards)?,
        (AdvantageKind::Group, false) => group_advantage(&rewards, batch.groups())?,
        (AdvantageKind::Group, true) => leave_one_out(&rewards, batch.groups())?,
    };
    if cfg.normalize_std {
        adv = normalize_std(&adv, batch.groups(), cfg.std_eps)?;
    }
    if let Some(tau) = cfg.filter_threshold() {
        adv = filter_by_threshold(&adv, tau)?;
    }
    Ok(adv)
}

/// On-policy RL: each round samples from a snapshot of the current
/// parameters, computes advantages and applies the update schedule.
/// With `out`, artifacts are written there as the run progresses.
pub fn train_rl(cfg: &RunConfig, out: Option<&Path>) -> Result<RlOutcome> {
    cfg.validate()?;
    let task = Arc::new(cfg.task_spec()?);
    let evals_sets = EvalSets::new(cfg)?;
    let mut artifacts = out.map(|dir| Artifacts::create(dir, cfg, &cfg.eval.k_list)).transpose()?;
    let mut params = init_params(cfg)?;
    let base = params.clone();
    let mut opt = OptimizerState::new(cfg.update.optimizer, cfg.update.adam, params.len());
    let pool = instance_pool(&task, Split::Train, 0, cfg.task.train_pool);
    let rounds = cfg.rounds();

    let mut outcome = RlOutcome { params: params.clone(), metrics: Vec::new(), timings: Vec::new(), evals: Vec::new() };
    let initial = evals_sets.run(cfg, &params, 0)?;
    if let Some(a) = artifacts.as_mut() {
        a.write_eval(&initial)?;
    }
    outcome.evals.push(initial);

    for round in 0..rounds {
        let t_round = Instant::now();
        let (epoch, instances) = round_instances(cfg, &pool, round);
        let plan = SamplingPlan { seed: derive_seed(cfg.seed, &[stream::ROUND, round as u64]), ..cfg.sampling.clone() };
        let snapshot = Arc::new(params.clone());

        let t0 = Instant::now();
        let (batch, calls) = sample_round(&plan, cfg, &snapshot, &task, instances)?;
        let sampling_secs = t0.elapsed().as_secs_f64();
        if cfg.train.verify_fraction > 0.0 {
            verify_snapshot(
                &batch,
                &snapshot,
                cfg.train.verify_fraction,
                derive_seed(cfg.seed, &[stream::VERIFY, round as u64]),
            )?;
        }
        let sampling_model_secs = match cfg.sampling.mode {
            SamplingMode::Preemptive => cfg.latency.preemptive_round_secs(&calls),
            SamplingMode::Interleaved => cfg.latency.interleaved_round_secs(&calls[0], cfg.sampling.workers),
        };

        let adv = compute_advantages(&batch, &cfg.update)?;
        let log = run_schedule(&batch, &adv, &cfg.update, &mut params, &base, &mut opt)?;
        let first = log.steps.first().expect("every schedule takes at least one step");
        let last = log.steps.last().expect("every schedule takes at least one step");

        let t_eval = Instant::now();
        let eval =
            if due(cfg.eval.every, round + 1, rounds) { Some(evals_sets.run(cfg, &params, round + 1)?) } else { None };
        let eval_secs = t_eval.elapsed().as_secs_f64();

        let record = MetricsRecord {
            round: round + 1,
            epoch,
            samples: batch.len(),
            mean_reward: batch.mean_reward(),
            mean_length: batch.mean_length(),
            mean_abs_adv: adv.mean_abs(),
            filtered_fraction: adv.filtered_fraction(),
            kept: adv.kept_count(),
            updates: log.steps.len(),
            objective: first.objective,
            loss: first.loss,
            kl: first.kl,
            grad_norm: last.grad_norm,
            sampling_model_secs,
            eval: eval.clone(),
        };
        let timing = TimingRecord {
            round: round + 1,
            samples: batch.len(),
            generation_calls: calls.iter().map(Vec::len).sum(),
            filtered_fraction: adv.filtered_fraction(),
            sampling_secs,
            loss_secs: log.loss_time_secs(),
            eval_secs,
            round_secs: t_round.elapsed().as_secs_f64(),
        };
        tracing::info!(
            round = round + 1,
            reward = record.mean_reward,
            filtered = record.filtered_fraction,
            acc = eval.as_ref().map(|e| e.in_dist.accuracy),
            "round done"
        );
        if let Some(a) = artifacts.as_mut() {
            a.write_round(&record, &timing)?;
            if let Some(e) = &eval {
                a.write_eval(e)?;
            }
            if cfg.train.checkpoint_every > 0 && (round + 1) % cfg.train.checkpoint_every == 0 {
                a.checkpoint(&params, task.vocab(), Some(round + 1))?;
            }
        }
        outcome.metrics.push(record);
        outcome.timings.push(timing);
        outcome.evals.extend(eval);
    }
    if let Some(a) = artifacts.as_mut() {
        a.checkpoint(&params, task.vocab(), None)?;
    }
    outcome.params = params;
    Ok(outcome)
}

/// Supervised fine-tuning on expert traces of the training pool.
pub fn train_sft(cfg: &RunConfig, out: Option<&Path>) -> Result<SftOutcome> {
    cfg.validate()?;
    let task = cfg.task_spec()?;
    let evals_sets = EvalSets::new(cfg)?;
    let mut artifacts = out.map(|dir| Artifacts::create(dir, cfg, &cfg.eval.k_list)).transpose()?;
    let mut params = init_params(cfg)?;
    let mut opt = OptimizerState::new(cfg.update.optimizer, cfg.update.adam, params.len());
    let pairs: Vec<Trajectory> = instance_pool(&task, Split::Train, 0, cfg.task.train_pool)
        .iter()
        .map(|inst| expert_trajectory(&task, inst, cfg.sft.verbosity))
        .collect::<Result<_>>()?;

    let mut outcome = SftOutcome { params: params.clone(), metrics: Vec::new(), evals: Vec::new() };
    let initial = evals_sets.run(cfg, &params, 0)?;
    if let Some(a) = artifacts.as_mut() {
        a.write_eval(&initial)?;
    }
    outcome.evals.push(initial);

    let epochs = cfg.sft.epochs;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut steps = 0;
        let mut grad_norm = 0.0;
        for chunk in order.chunks(cfg.sft.batch_size) {
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let grad = sft_gradient(&params, &batch)?;
            grad_norm = grad.norm();
            optimizer_step(&mut params, &grad, &mut opt, cfg.update.lr)?;
            steps += 1;
        }
        let eval =
            if due(cfg.eval.every, epoch + 1, epochs) { Some(evals_sets.run(cfg, &params, epoch + 1)?) } else { None };
        let record = SftRecord {
            epoch: epoch + 1,
            steps,
            train_log_likelihood: mean_log_likelihood(&params, &pairs)?,
            grad_norm,
            eval: eval.clone(),
        };
        tracing::info!(
            epoch = epoch + 1,
            ll = record.train_log_likelihood,
            acc = eval.as_ref().map(|e| e.in_dist.accuracy),
            "epoch done"
        );
        if let Some(a) = artifacts.as_mut() {
            a.write_sft(&record)?;
            if let Some(e) = &eval {
                a.write_eval(e)?;
            }
            if cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0 {
                a.checkpoint(&params, task.vocab(), Some(epoch + 1))?;
            }
        }
        outcome.metrics.push(record);
        outcome.evals.extend(eval);
    }
    if let Some(a) = artifacts.as_mut() {
        a.checkpoint(&params, task.vocab(), None)?;
    }
    outcome.params = params;
    Ok(outcome)
}

/// Evaluates `params` on both evaluation splits of `cfg`.
pub fn evaluate_run(cfg: &RunConfig, params: &PolicyParams) -> Result<EvalRecord> {
    EvalSets::new(cfg)?.run(cfg, params, 0)
}
