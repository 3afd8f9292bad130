use serde::{Deserialize, Serialize};

use super::CallRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discount {
    /// Every active sequence costs one unit per decoding step.
    Flat,
    /// A step with `b` active sequences costs `max(1, b / knee)` units.
    Linear,
}

/// Modeled cost of a generation call. A call whose requests have completion
/// lengths `l_1..l_b` takes
/// `overhead + per_token * Σ_s cost(#{i : l_i >= s})` seconds, summed over
/// decoding steps `s = 1..max l_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub call_overhead_secs: f64,
    pub per_token_secs: f64,
    pub discount: Discount,
    pub knee: usize,
    /// Cost of publishing the snapshot to the workers, once per round.
    pub publish_secs: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            call_overhead_secs: 0.05,
            per_token_secs: 1e-3,
            discount: Discount::Linear,
            knee: 128,
            publish_secs: 0.0,
        }
    }
}

impl LatencyModel {
    /// Per-item cost independent of batch size and no call overhead.
    pub fn flat() -> Self {
        Self { call_overhead_secs: 0.0, discount: Discount::Flat, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |key: &str| Error::Config { key: format!("latency.{key}"), msg: "must be a finite value >= 0".into() };
        for (key, v) in [
            ("call_overhead_secs", self.call_overhead_secs),
            ("per_token_secs", self.per_token_secs),
            ("publish_secs", self.publish_secs),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key));
            }
        }
        if self.knee == 0 {
            return Err(Error::Config { key: "latency.knee".into(), msg: "must be >= 1".into() });
        }
        Ok(())
    }

    fn step_units(&self, active: usize) -> f64 {
        match self.discount {
            Discount::Flat => active as f64,
            Discount::Linear => (active as f64 / self.knee as f64).max(1.0),
        }
    }

    /// Cost of one decoding step over `batch` active sequences, per sequence.
    pub fn per_item_step_secs(&self, batch: usize) -> f64 {
        self.per_token_secs * self.step_units(batch) / batch.max(1) as f64
    }

    pub fn call_secs(&self, lengths: &[usize]) -> f64 {
        let longest = lengths.iter().copied().max().unwrap_or(0);
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let mut idx = 0;
        let mut units = 0.0;
        for s in 1..=longest {
            while idx < sorted.len() && sorted[idx] < s {
                idx += 1;
            }
            units += self.step_units(sorted.len() - idx);
        }
        self.call_overhead_secs + self.per_token_secs * units
    }

    /// Calls issued back to back.
    pub fn sequential_secs(&self, calls: &[CallRecord]) -> f64 {
        calls.iter().map(|c| self.call_secs(&c.lengths)).sum()
    }

    /// Publish, then workers run concurrently; the round ends with the
    /// slowest worker.
    pub fn preemptive_round_secs(&self, per_worker: &[Vec<CallRecord>]) -> f64 {
        self.publish_secs + per_worker.iter().map(|c| self.sequential_secs(c)).fold(0.0, f64::max)
    }

    /// Publish, then every micro-batch in sequence, each split evenly into
    /// concurrent calls on `workers` workers.
    pub fn interleaved_round_secs(&self, calls: &[CallRecord], workers: usize) -> f64 {
        let split = |lengths: &[usize]| {
            let per = lengths.len().div_ceil(workers.max(1)).max(1);
            lengths.chunks(per).map(|c| self.call_secs(c)).fold(self.call_secs(&[]), f64::max)
        };
        self.publish_secs + calls.iter().map(|c| split(&c.lengths)).sum::<f64>()
    }
}
