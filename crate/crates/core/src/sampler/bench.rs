use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{drain, interleaved_sample, preemptive_sample, CallRecord, LatencyModel, SamplingPlan};
use crate::advantage::{filter_by_threshold, group_advantage, AdvantageBatch};
use crate::error::Result;
use crate::policy::{PolicyParams, TokenId};
use crate::rng::derive_seed;
use crate::tasks::{instance_pool, Split, TaskSpec};
use crate::updates::{batch_gradient, EstimatorOpts, RolloutBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub rounds: usize,
    /// Timed repetitions of each loss computation; the minimum is reported.
    pub loss_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { rounds: 3, loss_repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRound {
    pub round: usize,
    pub samples: usize,
    pub preemptive_calls: usize,
    pub interleaved_calls: usize,
    pub preemptive_model_secs: f64,
    pub interleaved_model_secs: f64,
    pub preemptive_wall_secs: f64,
    pub interleaved_wall_secs: f64,
    /// Both modes produced the same trajectories.
    pub same_rollouts: bool,
    pub uniform_group_fraction: f64,
    pub filtered_fraction: f64,
    pub loss_secs_filtered: f64,
    pub loss_secs_unfiltered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub plan: SamplingPlan,
    pub latency: LatencyModel,
    pub rounds: Vec<BenchRound>,
    pub preemptive_model_secs: f64,
    pub interleaved_model_secs: f64,
    /// Preemptive over interleaved modeled time.
    pub ratio: f64,
    /// Interleaved over preemptive modeled time.
    pub speedup: f64,
    pub loss_secs_filtered: f64,
    pub loss_secs_unfiltered: f64,
}

fn rollout_keys(batch: &RolloutBatch) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut keys: Vec<_> = batch.items().iter().map(|r| (r.traj.prompt.clone(), r.traj.completion.clone())).collect();
    keys.sort();
    keys
}

fn time_loss(batch: &RolloutBatch, adv: &AdvantageBatch, params: &PolicyParams, repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        batch_gradient(batch, adv, params, None, &EstimatorOpts::pg(), batch.len().max(1))?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Runs each round in both modes from the same snapshot and compares
/// modeled sampling time, rollouts and loss time with and without filtering.
/// `filter_tau` is the advantage threshold for the filtered loss timing.
pub fn bench_sampler(
    plan: &SamplingPlan,
    latency: &LatencyModel,
    filter_tau: f64,
    cfg: &BenchConfig,
    snapshot: Arc<PolicyParams>,
    task: Arc<TaskSpec>,
) -> Result<BenchReport> {
    plan.validate()?;
    latency.validate()?;
    let per_call = plan.micro_batch / plan.group_size;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let round_plan = SamplingPlan { seed: derive_seed(plan.seed, &[r as u64]), ..plan.clone() };
        let instances = instance_pool(&task, Split::Train, (r * plan.prompts) as u64, plan.prompts);

        let t0 = Instant::now();
        let out = preemptive_sample(&round_plan, snapshot.clone(), task.clone(), Arc::new(instances.clone()))?;
        let preemptive_wall_secs = t0.elapsed().as_secs_f64();
        let preemptive_calls: usize = out.calls.iter().map(Vec::len).sum();
        let preemptive_model_secs = latency.preemptive_round_secs(&out.calls);
        let batch = drain(out.cache)?;

        let t0 = Instant::now();
        let mut groups = Vec::with_capacity(plan.prompts);
        let mut calls: Vec<CallRecord> = Vec::new();
        for (c, chunk) in instances.chunks(per_call).enumerate() {
            let (g, call) = interleaved_sample(&round_plan, &snapshot, &task, chunk, c * per_call)?;
            groups.extend(g);
            calls.push(call);
        }
        let interleaved_wall_secs = t0.elapsed().as_secs_f64();
        let interleaved = super::batch_from_groups(groups, snapshot.fingerprint())?;

        let rewards = batch.rewards();
        let uniform = batch.groups().groups().iter().filter(|g| g.iter().all(|&i| rewards[i] == rewards[g[0]])).count();
        let adv = group_advantage(&rewards, batch.groups())?;
        let filtered = filter_by_threshold(&adv, filter_tau)?;
        rounds.push(BenchRound {
            round: r,
            samples: batch.len(),
            preemptive_calls,
            interleaved_calls: calls.len(),
            preemptive_model_secs,
            interleaved_model_secs: latency.interleaved_round_secs(&calls, plan.workers),
            preemptive_wall_secs,
            interleaved_wall_secs,
            same_rollouts: rollout_keys(&batch) == rollout_keys(&interleaved),
            uniform_group_fraction: uniform as f64 / plan.prompts as f64,
            filtered_fraction: filtered.filtered_fraction(),
            loss_secs_filtered: time_loss(&batch, &filtered, &snapshot, cfg.loss_repeats)?,
            loss_secs_unfiltered: time_loss(&batch, &adv, &snapshot, cfg.loss_repeats)?,
        });
    }
    let sum = |f: fn(&BenchRound) -> f64| rounds.iter().map(f).sum::<f64>();
    let preemptive_model_secs = sum(|r| r.preemptive_model_secs);
    let interleaved_model_secs = sum(|r| r.interleaved_model_secs);
    let ratio = if interleaved_model_secs > 0.0 { preemptive_model_secs / interleaved_model_secs } else { 1.0 };
    Ok(BenchReport {
        plan: plan.clone(),
        latency: latency.clone(),
        preemptive_model_secs,
        interleaved_model_secs,
        ratio,
        speedup: if ratio > 0.0 { 1.0 / ratio } else { f64::INFINITY },
        loss_secs_filtered: sum(|r| r.loss_secs_filtered),
        loss_secs_unfiltered: sum(|r| r.loss_secs_unfiltered),
        rounds,
    })
}
