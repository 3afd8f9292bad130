//! Gradient estimators and update schedules.
//!
//! All gradients point in the ascent direction of the expected reward J.
//! Batch means divide by the full batch size, filtered items included, so a
//! filtered item contributes exactly what a zero advantage would.

mod optimizer;
mod schedule;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageBatch, GroupIndex};
use crate::error::{input, Error, Result};
use crate::policy::{accumulate_grad_log_prob, accumulate_kl, GradientVector, PolicyParams, Trajectory};

pub use optimizer::{optimizer_step, AdamParams, OptimizerKind, OptimizerState};
pub use schedule::{run_schedule, ScheduleLog, StepLog};

/// Items evaluated concurrently before their gradients are summed in order.
const PAR_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// One PG step on the whole batch.
    Dash,
    /// K PPO steps, each on the whole batch.
    Multi,
    /// K PPO steps, one per mini-batch.
    Mini,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    Group,
    SinglePath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    pub schedule: Schedule,
    /// KL weight; 0 disables the KL term.
    pub beta: f64,
    pub clip_eps: f64,
    /// Optimizer steps per frozen snapshot (MULTI and MINI).
    pub k_steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub filter: bool,
    /// Items with `|Â| <= filter_tau` are dropped when `filter` is on.
    pub filter_tau: f64,
    /// Scale each item by `1 / len(ŷ)`.
    pub length_normalize: bool,
    /// Items per gradient-accumulation micro-batch.
    pub micro_batch: usize,
    pub advantage: AdvantageKind,
    pub normalize_std: bool,
    pub std_eps: f64,
    pub leave_one_out: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::Dash,
            beta: 0.0,
            clip_eps: 0.2,
            k_steps: 1,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            filter: true,
            filter_tau: 0.1,
            length_normalize: false,
            micro_batch: 8,
            advantage: AdvantageKind::Group,
            normalize_std: false,
            std_eps: 1e-4,
            leave_one_out: false,
        }
    }
}

fn cfg_err<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config { key: format!("update.{key}"), msg: msg.into() })
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return cfg_err("beta", "must be a finite value >= 0");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return cfg_err("clip_eps", "must be > 0");
        }
        if self.k_steps == 0 {
            return cfg_err("k_steps", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return cfg_err("lr", "must be > 0");
        }
        if !(self.filter_tau >= 0.0) {
            return cfg_err("filter_tau", "must be >= 0");
        }
        if self.micro_batch == 0 {
            return cfg_err("micro_batch", "must be >= 1");
        }
        if !(self.std_eps >= 0.0) {
            return cfg_err("std_eps", "must be >= 0");
        }
        if self.leave_one_out && self.advantage == AdvantageKind::SinglePath {
            return cfg_err("leave_one_out", "applies to group advantages only");
        }
        self.adam.validate()
    }

    /// Checks the batch-dependent invariants.
    pub fn validate_for_batch(&self, batch_len: usize) -> Result<()> {
        self.validate()?;
        if self.schedule == Schedule::Mini && !batch_len.is_multiple_of(self.k_steps) {
            return cfg_err(
                "k_steps",
                format!("MINI needs a batch divisible into {} mini-batches, got {batch_len}", self.k_steps),
            );
        }
        Ok(())
    }

    pub fn filter_threshold(&self) -> Option<f64> {
        self.filter.then_some(self.filter_tau)
    }
}

/// A sampled trajectory with its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub traj: Trajectory,
    pub reward: f64,
}

/// Trajectories generated by one snapshot θ_old, grouped by prompt.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    items: Vec<Rollout>,
    groups: GroupIndex,
    snapshot_id: u64,
}

impl RolloutBatch {
    pub fn new(items: Vec<Rollout>, groups: GroupIndex, snapshot_id: u64) -> Result<Self> {
        let prompts: Vec<&[u32]> = items.iter().map(|r| r.traj.prompt.as_slice()).collect();
        groups.check_prompts(&prompts)?;
        Ok(Self { items, groups, snapshot_id })
    }

    pub fn items(&self) -> &[Rollout] {
        &self.items
    }

    pub fn groups(&self) -> &GroupIndex {
        &self.groups
    }

    pub fn snapshot_id(&self) -> u64 {
        self.snapshot_id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items `range`, with groups restricted to the range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> RolloutBatch {
        let groups: Vec<Vec<usize>> = self
            .groups
            .groups()
            .iter()
            .filter_map(|g| {
                let members: Vec<usize> = g.iter().filter(|i| range.contains(i)).map(|i| i - range.start).collect();
                (!members.is_empty()).then_some(members)
            })
            .collect();
        let len = range.len();
        RolloutBatch {
            items: self.items[range].to_vec(),
            groups: GroupIndex::new(groups, len).expect("restriction of a partition is a partition"),
            snapshot_id: self.snapshot_id,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.items.iter().map(|r| r.reward).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.items.iter().map(|r| r.reward).sum::<f64>() / self.len() as f64
        }
    }

    pub fn mean_length(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.items.iter().map(|r| r.traj.len() as f64).sum::<f64>() / self.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// On-policy likelihood-ratio gradient.
    Pg,
    /// Clipped surrogate against the recorded snapshot log-probs.
    Ppo { clip_eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOpts {
    pub estimator: Estimator,
    pub beta: f64,
    pub length_normalize: bool,
}

impl EstimatorOpts {
    pub fn pg() -> Self {
        Self { estimator: Estimator::Pg, beta: 0.0, length_normalize: false }
    }

    pub fn ppo(clip_eps: f64) -> Self {
        Self { estimator: Estimator::Ppo { clip_eps }, beta: 0.0, length_normalize: false }
    }

    pub fn from_config(cfg: &UpdateConfig, estimator: Estimator) -> Self {
        Self { estimator, beta: cfg.beta, length_normalize: cfg.length_normalize }
    }
}

/// Running sums of per-item gradient terms; divide once at the end.
#[derive(Debug, Clone)]
pub struct Accumulator {
    grad: GradientVector,
    objective: f64,
    kl: f64,
    items: usize,
    kept: usize,
    abs_adv: f64,
}

/// Batch means reported alongside a gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub items: usize,
    pub kept: usize,
    /// Mean surrogate objective (ρÂ, clipped where PPO clips).
    pub objective: f64,
    /// Mean per-trajectory KL(base ‖ θ) over the batch; 0 when β = 0.
    pub kl: f64,
    pub mean_abs_adv: f64,
}

impl GradientStats {
    pub fn filtered_fraction(&self) -> f64 {
        if self.items == 0 {
            0.0
        } else {
            1.0 - self.kept as f64 / self.items as f64
        }
    }
}

struct ItemTerm {
    grad: Option<Vec<f64>>,
    objective: f64,
    kl: f64,
}

impl Accumulator {
    pub fn new(params: &PolicyParams) -> Self {
        Self { grad: GradientVector::zeros_like(params), objective: 0.0, kl: 0.0, items: 0, kept: 0, abs_adv: 0.0 }
    }

    /// Adds the terms of `rollouts` (with matching `adv`) to the sums.
    pub fn add(
        &mut self,
        params: &PolicyParams,
        base: Option<&PolicyParams>,
        rollouts: &[Rollout],
        adv: &AdvantageBatch,
        opts: &EstimatorOpts,
    ) -> Result<()> {
        if rollouts.len() != adv.len() {
            return input(format!("{} rollouts with {} advantages", rollouts.len(), adv.len()));
        }
        if opts.beta > 0.0 {
            match base {
                Some(b) => b.check_same_arch(params.arch())?,
                None => return input("beta > 0 needs base params"),
            }
        }
        let n = rollouts.len();
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(PAR_CHUNK) {
            let terms: Vec<Result<ItemTerm>> = chunk
                .par_iter()
                .map(|&i| item_term(params, base, &rollouts[i], adv.advantages()[i], adv.kept()[i], opts))
                .collect();
            for term in terms {
                let term = term?;
                if let Some(g) = term.grad {
                    for (a, b) in self.grad.as_mut_slice().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                self.objective += term.objective;
                self.kl += term.kl;
            }
        }
        self.items += n;
        self.kept += adv.kept_count();
        self.abs_adv += adv.advantages().iter().map(|a| a.abs()).sum::<f64>();
        Ok(())
    }

    /// Mean gradient over every item added.
    pub fn finish(self) -> (GradientVector, GradientStats) {
        let n = self.items.max(1) as f64;
        let mut grad = self.grad;
        grad.scale(1.0 / n);
        let stats = GradientStats {
            items: self.items,
            kept: self.kept,
            objective: self.objective / n,
            kl: self.kl / n,
            mean_abs_adv: self.abs_adv / n,
        };
        (grad, stats)
    }
}

fn item_term(
    params: &PolicyParams,
    base: Option<&PolicyParams>,
    rollout: &Rollout,
    adv: f64,
    kept: bool,
    opts: &EstimatorOpts,
) -> Result<ItemTerm> {
    if !kept {
        return Ok(ItemTerm { grad: None, objective: 0.0, kl: 0.0 });
    }
    let traj = &rollout.traj;
    let w = if opts.length_normalize && !traj.is_empty() { 1.0 / traj.len() as f64 } else { 1.0 };
    let mut grad = vec![0.0; params.len()];
    let pass = crate::policy::model_pass(params, traj)?;
    let ratio = (pass.log_prob.total - traj.total_log_prob()).exp();
    let (objective, weight) = match opts.estimator {
        Estimator::Pg => (ratio * adv * w, adv * w),
        Estimator::Ppo { clip_eps } => {
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
            if unclipped <= clipped {
                (unclipped * w, ratio * adv * w)
            } else {
                (clipped * w, 0.0)
            }
        }
    };
    pass.backward(weight, &mut grad);
    let kl = match base {
        Some(base) if opts.beta > 0.0 => accumulate_kl(params, base, traj, -opts.beta, &mut grad)?,
        _ => 0.0,
    };
    Ok(ItemTerm { grad: Some(grad), objective, kl })
}

fn check_on_policy(batch: &RolloutBatch, params: &PolicyParams) -> Result<()> {
    let found = params.fingerprint();
    if found != batch.snapshot_id {
        return Err(Error::OnPolicy { expected: batch.snapshot_id, found });
    }
    Ok(())
}

fn check_adv(batch: &RolloutBatch, adv: &AdvantageBatch) -> Result<()> {
    if batch.len() != adv.len() {
        return input(format!("batch of {} with {} advantages", batch.len(), adv.len()));
    }
    Ok(())
}

/// Gradient of the batch with the given options, accumulated over
/// micro-batches of `micro_batch` items.
pub fn batch_gradient(
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    params: &PolicyParams,
    base: Option<&PolicyParams>,
    opts: &EstimatorOpts,
    micro_batch: usize,
) -> Result<(GradientVector, GradientStats)> {
    check_adv(batch, adv)?;
    if micro_batch == 0 {
        return input("micro-batch size must be positive");
    }
    let mut acc = Accumulator::new(params);
    let mut start = 0;
    while start < batch.len() {
        let end = (start + micro_batch).min(batch.len());
        let mut micro = Accumulator::new(params);
        micro.add(params, base, &batch.items[start..end], &adv.slice(start..end), opts)?;
        acc.merge(micro);
        start = end;
    }
    Ok(acc.finish())
}

impl Accumulator {
    fn merge(&mut self, other: Accumulator) {
        self.grad.axpy(1.0, &other.grad);
        self.objective += other.objective;
        self.kl += other.kl;
        self.items += other.items;
        self.kept += other.kept;
        self.abs_adv += other.abs_adv;
    }
}

/// Mean over the batch of `Â_n ∇ log π_θ(ŷ_n | x_n)` for kept items.
/// `params` must be the snapshot that generated the batch.
pub fn pg_gradient(batch: &RolloutBatch, adv: &AdvantageBatch, params: &PolicyParams) -> Result<GradientVector> {
    check_on_policy(batch, params)?;
    Ok(batch_gradient(batch, adv, params, None, &EstimatorOpts::pg(), batch.len().max(1))?.0)
}

/// Gradient of the mean clipped surrogate `min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)`,
/// with ρ the sequence-level ratio against the recorded log-probs.
pub fn ppo_gradient(
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    params: &PolicyParams,
    clip_eps: f64,
) -> Result<GradientVector> {
    if !(clip_eps > 0.0) {
        return input(format!("clip_eps must be positive, got {clip_eps}"));
    }
    Ok(batch_gradient(batch, adv, params, None, &EstimatorOpts::ppo(clip_eps), batch.len().max(1))?.0)
}

/// Mean clipped surrogate value (the quantity `ppo_gradient` differentiates).
pub fn ppo_surrogate(batch: &RolloutBatch, adv: &AdvantageBatch, params: &PolicyParams, clip_eps: f64) -> Result<f64> {
    check_adv(batch, adv)?;
    let mut total = 0.0;
    for ((rollout, &a), &kept) in batch.items.iter().zip(adv.advantages()).zip(adv.kept()) {
        if !kept {
            continue;
        }
        let lp = crate::policy::log_prob(params, &rollout.traj)?;
        let ratio = (lp.total - rollout.traj.total_log_prob()).exp();
        total += (ratio * a).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a);
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Mean KL(base ‖ θ) over kept items and its gradient (of the KL itself).
pub fn kl_penalty(
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    params: &PolicyParams,
    base: &PolicyParams,
) -> Result<(f64, GradientVector)> {
    check_adv(batch, adv)?;
    base.check_same_arch(params.arch())?;
    let mut grad = GradientVector::zeros_like(params);
    let mut kl = 0.0;
    for (rollout, &kept) in batch.items.iter().zip(adv.kept()) {
        if kept {
            kl += accumulate_kl(params, base, &rollout.traj, 1.0, grad.as_mut_slice())?;
        }
    }
    let n = batch.len().max(1) as f64;
    grad.scale(1.0 / n);
    Ok((kl / n, grad))
}

/// Inner estimator gradient minus `β ∇ KL(base ‖ θ)`.
pub fn composite_gradient(
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    params: &PolicyParams,
    base: &PolicyParams,
    cfg: &UpdateConfig,
    estimator: Estimator,
) -> Result<(GradientVector, GradientStats)> {
    if estimator == Estimator::Pg {
        check_on_policy(batch, params)?;
    }
    let opts = EstimatorOpts::from_config(cfg, estimator);
    batch_gradient(batch, adv, params, Some(base), &opts, cfg.micro_batch)
}

/// Mean gradient of `log π_θ(y | x)` over expert trajectories.
pub fn sft_gradient(params: &PolicyParams, pairs: &[Trajectory]) -> Result<GradientVector> {
    if pairs.is_empty() {
        return input("no SFT pairs");
    }
    let mut grad = GradientVector::zeros_like(params);
    for chunk in pairs.chunks(PAR_CHUNK) {
        let parts: Vec<Result<Vec<f64>>> = chunk
            .par_iter()
            .map(|t| {
                let mut g = vec![0.0; params.len()];
                accumulate_grad_log_prob(params, t, 1.0, &mut g)?;
                Ok(g)
            })
            .collect();
        for g in parts {
            for (a, b) in grad.as_mut_slice().iter_mut().zip(&g?) {
                *a += b;
            }
        }
    }
    grad.scale(1.0 / pairs.len() as f64);
    Ok(grad)
}

/// Mean log-likelihood of expert trajectories.
pub fn mean_log_likelihood(params: &PolicyParams, pairs: &[Trajectory]) -> Result<f64> {
    if pairs.is_empty() {
        return input("no SFT pairs");
    }
    let totals: Vec<Result<f64>> = pairs.par_iter().map(|t| Ok(crate::policy::log_prob(params, t)?.total)).collect();
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(sum / pairs.len() as f64)
}
