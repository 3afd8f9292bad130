//! Rollout generation.
//!
//! A round samples G completions for each of M prompts from one frozen
//! snapshot. Request `(m, g)` always uses the seed `derive_seed(plan.seed,
//! [m, g])`, so the sampled multiset does not depend on the worker count,
//! worker batch size or sampling mode.

mod bench;
mod cache;
mod latency;

use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::advantage::GroupIndex;
use crate::error::{Error, Result};
use crate::policy::{log_prob, sample, PolicyParams};
use crate::rng::{derive_seed, rng_from};
use crate::tasks::{reward, ProblemInstance, TaskSpec};
use crate::updates::{Rollout, RolloutBatch};

pub use bench::{bench_sampler, BenchConfig, BenchReport, BenchRound};
pub use cache::{CacheError, Group, GroupStatus, RolloutCache};
pub use latency::{Discount, LatencyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Workers fill the cache for the whole round up front.
    Preemptive,
    /// Sampling alternates with loss computation, one micro-batch at a time.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPlan {
    /// Prompts per round (M).
    pub prompts: usize,
    /// Completions per prompt (G).
    pub group_size: usize,
    /// Worker threads (H).
    pub workers: usize,
    /// Requests per generation call.
    pub worker_batch: usize,
    /// Completion length cap; 0 uses the task maximum.
    pub max_len: usize,
    pub temperature: f64,
    pub mode: SamplingMode,
    /// Serve groups as soon as they complete instead of after the round.
    pub streaming: bool,
    /// Samples per generation call in interleaved mode.
    pub micro_batch: usize,
    /// Round seed; the trainer derives one per round.
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            prompts: 256,
            group_size: 4,
            workers: 2,
            worker_batch: 256,
            max_len: 0,
            temperature: 1.0,
            mode: SamplingMode::Preemptive,
            streaming: false,
            micro_batch: 8,
            seed: 0,
        }
    }
}

fn plan_err<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config { key: format!("sampling.{key}"), msg: msg.into() })
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 {
            return plan_err("prompts", "must be >= 1");
        }
        if self.group_size == 0 {
            return plan_err("group_size", "must be >= 1");
        }
        if self.workers == 0 {
            return plan_err("workers", "must be >= 1");
        }
        if self.worker_batch == 0 {
            return plan_err("worker_batch", "must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return plan_err("temperature", "must be > 0");
        }
        if self.micro_batch == 0 || !self.micro_batch.is_multiple_of(self.group_size) {
            return plan_err("micro_batch", format!("must be a positive multiple of group_size ({})", self.group_size));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.prompts * self.group_size
    }

    pub fn completion_cap(&self, task: &TaskSpec) -> usize {
        if self.max_len == 0 {
            task.max_completion_len()
        } else {
            self.max_len
        }
    }

    pub fn request_seed(&self, prompt_id: usize, member: usize) -> u64 {
        derive_seed(self.seed, &[prompt_id as u64, member as u64])
    }

    /// Prompt ids owned by worker `w`: a contiguous block of whole groups.
    pub fn worker_prompts(&self, w: usize) -> std::ops::Range<usize> {
        let h = self.workers.min(self.prompts);
        if w >= h {
            return 0..0;
        }
        (w * self.prompts / h)..((w + 1) * self.prompts / h)
    }
}

/// One generation call: the completion lengths of its requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub lengths: Vec<usize>,
}

impl CallRecord {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

fn sample_request(
    plan: &SamplingPlan,
    snapshot: &PolicyParams,
    task: &TaskSpec,
    instance: &ProblemInstance,
    prompt_id: usize,
    member: usize,
) -> Result<Rollout> {
    let traj = sample(
        snapshot,
        instance.prompt_tokens(),
        plan.completion_cap(task),
        plan.temperature,
        task.vocab().eos(),
        plan.request_seed(prompt_id, member),
    )?;
    let r = reward(task, instance, &traj);
    Ok(Rollout { traj, reward: r })
}

fn run_worker(
    w: usize,
    plan: &SamplingPlan,
    snapshot: &PolicyParams,
    snapshot_id: u64,
    task: &TaskSpec,
    instances: &[ProblemInstance],
    cache: &RolloutCache,
) -> Result<Vec<CallRecord>> {
    let requests: Vec<(usize, usize)> =
        plan.worker_prompts(w).flat_map(|m| (0..plan.group_size).map(move |g| (m, g))).collect();
    let mut calls = Vec::new();
    let mut pending: Vec<Rollout> = Vec::with_capacity(plan.group_size);
    for chunk in requests.chunks(plan.worker_batch) {
        if let Some(msg) = cache.aborted() {
            return Err(Error::RoundAborted(format!("worker {w} stopped: {msg}")));
        }
        let mut lengths = Vec::with_capacity(chunk.len());
        for &(m, g) in chunk {
            let rollout = sample_request(plan, snapshot, task, &instances[m], m, g)?;
            lengths.push(rollout.traj.len());
            pending.push(rollout);
            if pending.len() == plan.group_size {
                cache.insert(Group {
                    prompt_id: m,
                    instance: instances[m].clone(),
                    rollouts: std::mem::take(&mut pending),
                    snapshot_id,
                })?;
            }
        }
        calls.push(CallRecord { lengths });
    }
    Ok(calls)
}

/// An in-flight preemptive round.
pub struct Round {
    cache: Arc<RolloutCache>,
    workers: Vec<JoinHandle<Result<Vec<CallRecord>>>>,
}

impl Round {
    pub fn cache(&self) -> &RolloutCache {
        &self.cache
    }

    /// Waits for every worker. Any failure aborts the round with a
    /// diagnostic naming the failed workers and the groups that completed.
    pub fn join(self) -> Result<RoundOutput> {
        let mut calls = Vec::with_capacity(self.workers.len());
        let mut failures = Vec::new();
        for (w, handle) in self.workers.into_iter().enumerate() {
            match handle.join() {
                Ok(Ok(c)) => calls.push(c),
                Ok(Err(e)) => {
                    self.cache.abort(format!("worker {w} failed"));
                    failures.push(format!("worker {w}: {e}"));
                    calls.push(Vec::new());
                }
                Err(_) => {
                    self.cache.abort(format!("worker {w} panicked"));
                    failures.push(format!("worker {w}: panicked"));
                    calls.push(Vec::new());
                }
            }
        }
        if !failures.is_empty() {
            let status = self.cache.status();
            let missing: Vec<usize> =
                status.iter().enumerate().filter(|(_, s)| **s == GroupStatus::Pending).map(|(i, _)| i).collect();
            return Err(Error::RoundAborted(format!(
                "{}; {}/{} groups complete, missing prompt ids {:?}",
                failures.join("; "),
                status.len() - missing.len(),
                status.len(),
                missing
            )));
        }
        let cache = Arc::try_unwrap(self.cache).map_err(|_| Error::RoundAborted("cache still shared".into()))?;
        Ok(RoundOutput { cache, calls })
    }
}

/// A finished preemptive round.
pub struct RoundOutput {
    pub cache: RolloutCache,
    /// Generation calls per worker, in order.
    pub calls: Vec<Vec<CallRecord>>,
}

/// Starts H workers sampling the round from `snapshot` into a fresh cache.
/// Groups can be consumed with [`RolloutCache::wait_group`] while workers run.
pub fn start_round(
    plan: &SamplingPlan,
    snapshot: Arc<PolicyParams>,
    task: Arc<TaskSpec>,
    instances: Arc<Vec<ProblemInstance>>,
    strict: bool,
) -> Result<Round> {
    plan.validate()?;
    if instances.len() != plan.prompts {
        return crate::error::input(format!("plan has {} prompts, got {} instances", plan.prompts, instances.len()));
    }
    let snapshot_id = snapshot.fingerprint();
    let cache = Arc::new(RolloutCache::new(plan.prompts, plan.group_size, snapshot_id, strict));
    let workers = (0..plan.workers.min(plan.prompts))
        .map(|w| {
            let (plan, snapshot, task, instances, cache) =
                (plan.clone(), snapshot.clone(), task.clone(), instances.clone(), cache.clone());
            std::thread::Builder::new()
                .name(format!("sampler-{w}"))
                .spawn(move || {
                    let out = run_worker(w, &plan, &snapshot, snapshot_id, &task, &instances, &cache);
                    if out.is_err() {
                        cache.abort(format!("worker {w} failed"));
                    }
                    out
                })
                .map_err(Error::Io)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Round { cache, workers })
}

/// Samples a whole round and waits for it (barrier mode).
pub fn preemptive_sample(
    plan: &SamplingPlan,
    snapshot: Arc<PolicyParams>,
    task: Arc<TaskSpec>,
    instances: Arc<Vec<ProblemInstance>>,
) -> Result<RoundOutput> {
    start_round(plan, snapshot, task, instances, true)?.join()
}

/// Concatenates groups, in the given order, into a batch.
pub fn batch_from_groups(groups: Vec<Group>, snapshot_id: u64) -> Result<RolloutBatch> {
    let sizes: Vec<usize> = groups.iter().map(|g| g.rollouts.len()).collect();
    let index = GroupIndex::contiguous(&sizes)?;
    let items = groups.into_iter().flat_map(|g| g.rollouts).collect();
    RolloutBatch::new(items, index, snapshot_id)
}

/// Serves every group of a complete round in prompt order and closes it.
pub fn drain(cache: RolloutCache) -> Result<RolloutBatch> {
    let groups = (0..cache.len()).map(|m| cache.serve_group(m)).collect::<Result<Vec<_>, _>>()?;
    let snapshot_id = cache.snapshot_id();
    cache.close()?;
    batch_from_groups(groups, snapshot_id)
}

/// Synchronously samples the groups of `instances`, whose first element is
/// prompt `first_prompt` of the round, as one generation call.
pub fn interleaved_sample(
    plan: &SamplingPlan,
    snapshot: &PolicyParams,
    task: &TaskSpec,
    instances: &[ProblemInstance],
    first_prompt: usize,
) -> Result<(Vec<Group>, CallRecord)> {
    let snapshot_id = snapshot.fingerprint();
    let mut lengths = Vec::new();
    let mut groups = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let m = first_prompt + i;
        let rollouts = (0..plan.group_size)
            .map(|g| sample_request(plan, snapshot, task, inst, m, g))
            .collect::<Result<Vec<_>>>()?;
        lengths.extend(rollouts.iter().map(|r| r.traj.len()));
        groups.push(Group { prompt_id: m, instance: inst.clone(), rollouts, snapshot_id });
    }
    Ok((groups, CallRecord { lengths }))
}

/// Replays the recorded log-probs of a random `fraction` of the batch (at
/// least one item) against `snapshot`; returns how many were checked.
pub fn verify_snapshot(batch: &RolloutBatch, snapshot: &PolicyParams, fraction: f64, seed: u64) -> Result<usize> {
    use rand::seq::index::sample as sample_indices;
    if batch.is_empty() {
        return Ok(0);
    }
    let n = ((batch.len() as f64 * fraction).ceil() as usize).clamp(1, batch.len());
    let mut rng = rng_from(seed);
    let mut picked = sample_indices(&mut rng, batch.len(), n).into_vec();
    picked.sort_unstable();
    for i in &picked {
        let traj = &batch.items()[*i].traj;
        let replay = log_prob(snapshot, traj)?;
        if replay.per_token != traj.log_probs {
            return Err(Error::OnPolicy { expected: batch.snapshot_id(), found: snapshot.fingerprint() });
        }
    }
    Ok(n)
}
