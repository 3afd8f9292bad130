use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    batch_gradient, check_adv, check_on_policy, optimizer_step, Estimator, EstimatorOpts, OptimizerState, RolloutBatch,
    Schedule, UpdateConfig,
};
use crate::advantage::AdvantageBatch;
use crate::error::Result;
use crate::policy::PolicyParams;

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Half-open item range of the batch used by this step.
    pub items: (usize, usize),
    pub kept: usize,
    /// Mean surrogate objective J over the step's items.
    pub objective: f64,
    /// `-objective + beta * kl`.
    pub loss: f64,
    pub kl: f64,
    pub mean_abs_adv: f64,
    pub filtered_fraction: f64,
    pub grad_norm: f64,
    /// Wall time spent computing the gradient, seconds.
    pub loss_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLog {
    pub steps: Vec<StepLog>,
}

impl ScheduleLog {
    pub fn loss_time_secs(&self) -> f64 {
        self.steps.iter().map(|s| s.loss_time_secs).sum()
    }
}

/// Applies `cfg.schedule` to a batch freshly sampled under `params`:
///
/// * DASH: one update from the PG gradient of the whole batch, accumulated
///   over micro-batches.
/// * MULTI: `k_steps` updates, each from the PPO gradient of the whole batch.
/// * MINI: `k_steps` updates, the k-th from the PPO gradient of mini-batch k.
///
/// PPO ratios are always taken against the log-probs recorded at sampling.
pub fn run_schedule(
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    cfg: &UpdateConfig,
    params: &mut PolicyParams,
    base: &PolicyParams,
    opt: &mut OptimizerState,
) -> Result<ScheduleLog> {
    cfg.validate_for_batch(batch.len())?;
    check_adv(batch, adv)?;
    check_on_policy(batch, params)?;
    let n = batch.len();
    let ppo = Estimator::Ppo { clip_eps: cfg.clip_eps };
    let plan: Vec<(Estimator, usize, usize)> = match cfg.schedule {
        Schedule::Dash => vec![(Estimator::Pg, 0, n)],
        Schedule::Multi => vec![(ppo, 0, n); cfg.k_steps],
        Schedule::Mini => {
            let size = n / cfg.k_steps;
            (0..cfg.k_steps).map(|k| (ppo, k * size, (k + 1) * size)).collect()
        }
    };

    let mut log = ScheduleLog::default();
    for (step, (estimator, start, end)) in plan.into_iter().enumerate() {
        let opts = EstimatorOpts::from_config(cfg, estimator);
        let sub = batch.slice(start..end);
        let sub_adv = adv.slice(start..end);
        let t0 = Instant::now();
        let (grad, stats) = batch_gradient(&sub, &sub_adv, params, Some(base), &opts, cfg.micro_batch)?;
        let loss_time_secs = t0.elapsed().as_secs_f64();
        optimizer_step(params, &grad, opt, cfg.lr)?;
        log.steps.push(StepLog {
            step,
            items: (start, end),
            kept: stats.kept,
            objective: stats.objective,
            loss: -stats.objective + cfg.beta * stats.kl,
            kl: stats.kl,
            mean_abs_adv: stats.mean_abs_adv,
            filtered_fraction: stats.filtered_fraction(),
            grad_norm: grad.norm(),
            loss_time_secs,
        });
    }
    Ok(log)
}
