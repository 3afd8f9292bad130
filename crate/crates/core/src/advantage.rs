//! Monte Carlo advantage estimates and gradient filtering.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::policy::TokenId;

/// Partition of batch indices into groups that share a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    groups: Vec<Vec<usize>>,
    len: usize,
}

impl GroupIndex {
    pub fn new(groups: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for g in &groups {
            if g.is_empty() {
                return input("empty group");
            }
            for &i in g {
                if i >= len {
                    return input(format!("index {i} outside a batch of {len}"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return input(format!("index {i} appears in two groups"));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return input(format!("index {i} is not in any group"));
        }
        Ok(Self { groups, len })
    }

    /// Consecutive groups of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<usize> = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        Self::new(groups, start)
    }

    /// `n_groups` consecutive groups of `size`.
    pub fn uniform(n_groups: usize, size: usize) -> Result<Self> {
        Self::contiguous(&vec![size; n_groups])
    }

    /// One group holding the whole batch.
    pub fn single(len: usize) -> Result<Self> {
        Self::contiguous(&[len])
    }

    /// Checks that every member of a group has the same prompt.
    pub fn check_prompts(&self, prompts: &[&[TokenId]]) -> Result<()> {
        if prompts.len() != self.len {
            return input(format!("{} prompts for a batch of {}", prompts.len(), self.len));
        }
        for g in &self.groups {
            let first = prompts[g[0]];
            if let Some(&i) = g.iter().find(|&&i| prompts[i] != first) {
                return input(format!("item {i} does not share its group's prompt"));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Batch-mean baseline (single-path).
    Batch,
    /// Per-prompt group mean.
    Group,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    advantages: Vec<f64>,
    baseline: BaselineKind,
    normalized: bool,
    kept: Vec<bool>,
}

impl AdvantageBatch {
    fn unfiltered(advantages: Vec<f64>, baseline: BaselineKind) -> Self {
        let kept = vec![true; advantages.len()];
        Self { advantages, baseline, normalized: false, kept }
    }

    /// Wraps externally computed advantages; everything is kept.
    pub fn from_values(advantages: Vec<f64>, baseline: BaselineKind) -> Self {
        Self::unfiltered(advantages, baseline)
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn baseline(&self) -> BaselineKind {
        self.baseline
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// `1 - kept / len`.
    pub fn filtered_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            1.0 - self.kept_count() as f64 / self.len() as f64
        }
    }

    pub fn mean_abs(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.advantages.iter().map(|a| a.abs()).sum::<f64>() / self.len() as f64
        }
    }

    /// Advantages with filtered items set to zero.
    pub fn zeroed_dropped(&self) -> Vec<f64> {
        self.advantages.iter().zip(&self.kept).map(|(&a, &k)| if k { a } else { 0.0 }).collect()
    }

    /// Items `range` of this batch, mask included.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            advantages: self.advantages[range.clone()].to_vec(),
            baseline: self.baseline,
            normalized: self.normalized,
            kept: self.kept[range].to_vec(),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `Â_n = r_n − mean(r)`.
pub fn single_path_advantage(rewards: &[f64]) -> Result<AdvantageBatch> {
    if rewards.is_empty() {
        return input("empty reward batch");
    }
    let b = mean(rewards.iter().copied());
    Ok(AdvantageBatch::unfiltered(rewards.iter().map(|r| r - b).collect(), BaselineKind::Batch))
}

fn check_len(rewards: &[f64], groups: &GroupIndex) -> Result<()> {
    if rewards.len() != groups.len() {
        return input(format!("{} rewards for a partition of {}", rewards.len(), groups.len()));
    }
    if rewards.is_empty() {
        return input("empty reward batch");
    }
    Ok(())
}

/// `Â_n = r_n − mean of n's group`.
pub fn group_advantage(rewards: &[f64], groups: &GroupIndex) -> Result<AdvantageBatch> {
    check_len(rewards, groups)?;
    let mut adv = vec![0.0; rewards.len()];
    for g in groups.groups() {
        let b = mean(g.iter().map(|&i| rewards[i]));
        for &i in g {
            adv[i] = rewards[i] - b;
        }
    }
    Ok(AdvantageBatch::unfiltered(adv, BaselineKind::Group))
}

/// `Â_n = r_n − mean of the rest of n's group`. Needs groups of two or more.
pub fn leave_one_out(rewards: &[f64], groups: &GroupIndex) -> Result<AdvantageBatch> {
    check_len(rewards, groups)?;
    let mut adv = vec![0.0; rewards.len()];
    for g in groups.groups() {
        if g.len() < 2 {
            return input(format!("leave-one-out needs groups of at least 2, got {}", g.len()));
        }
        let total: f64 = g.iter().map(|&i| rewards[i]).sum();
        let others = (g.len() - 1) as f64;
        for &i in g {
            adv[i] = rewards[i] - (total - rewards[i]) / others;
        }
    }
    Ok(AdvantageBatch::unfiltered(adv, BaselineKind::Group))
}

/// Divides each advantage by its group's (population) standard deviation
/// plus `eps`.
pub fn normalize_std(adv: &AdvantageBatch, groups: &GroupIndex, eps: f64) -> Result<AdvantageBatch> {
    if adv.normalized {
        return input("advantages are already normalized");
    }
    if adv.len() != groups.len() {
        return input(format!("{} advantages for a partition of {}", adv.len(), groups.len()));
    }
    if !(eps >= 0.0) {
        return input(format!("eps must be nonnegative, got {eps}"));
    }
    let mut out = adv.clone();
    for g in groups.groups() {
        let m = mean(g.iter().map(|&i| adv.advantages[i]));
        let var = mean(g.iter().map(|&i| (adv.advantages[i] - m).powi(2)));
        let denom = var.sqrt() + eps;
        for &i in g {
            out.advantages[i] = if denom > 0.0 { adv.advantages[i] / denom } else { 0.0 };
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Keeps items with `|Â| > tau`; values are untouched.
pub fn filter_by_threshold(adv: &AdvantageBatch, tau: f64) -> Result<AdvantageBatch> {
    if !(tau >= 0.0) {
        return input(format!("filter threshold must be nonnegative, got {tau}"));
    }
    let mut out = adv.clone();
    out.kept = adv.advantages.iter().map(|a| a.abs() > tau).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_path_examples() {
        let a = single_path_advantage(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.advantages(), &[0.5, -0.5, 0.5, -0.5]);
        assert_eq!(a.baseline(), BaselineKind::Batch);
        assert!(single_path_advantage(&[0.3; 5]).unwrap().advantages().iter().all(|&x| x == 0.0));
        assert!(single_path_advantage(&[]).is_err());
    }

    #[test]
    fn group_examples() {
        let g = GroupIndex::contiguous(&[4, 2]).unwrap();
        let a = group_advantage(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &g).unwrap();
        assert_eq!(a.advantages(), &[0.5, -0.5, -0.5, 0.5, 0.0, 0.0]);
        let singles = GroupIndex::uniform(3, 1).unwrap();
        assert!(group_advantage(&[1.0, 0.0, 1.0], &singles).unwrap().advantages().iter().all(|&x| x == 0.0));
        assert!(group_advantage(&[1.0, 0.0], &g).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(GroupIndex::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(GroupIndex::new(vec![vec![0, 1]], 3).is_err());
        assert!(GroupIndex::new(vec![vec![0, 3]], 3).is_err());
        assert!(GroupIndex::new(vec![vec![], vec![0]], 1).is_err());
        let g = GroupIndex::new(vec![vec![2, 0], vec![1]], 3).unwrap();
        assert!(g.check_prompts(&[&[0, 1], &[0, 2], &[0, 1]]).is_ok());
        assert!(g.check_prompts(&[&[0, 1], &[0, 2], &[0, 2]]).is_err());
    }

    #[test]
    fn normalization() {
        let g = GroupIndex::single(2).unwrap();
        let a = group_advantage(&[1.0, 0.0], &g).unwrap();
        let n = normalize_std(&a, &g, 0.0).unwrap();
        assert_eq!(n.advantages(), &[1.0, -1.0]);
        assert!(n.normalized());
        assert!(normalize_std(&n, &g, 0.0).is_err());
        let flat = group_advantage(&[1.0, 1.0, 1.0], &GroupIndex::single(3).unwrap()).unwrap();
        let n = normalize_std(&flat, &GroupIndex::single(3).unwrap(), 1e-4).unwrap();
        assert!(n.advantages().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn leave_one_out_examples() {
        let g = GroupIndex::single(2).unwrap();
        assert_eq!(leave_one_out(&[1.0, 0.0], &g).unwrap().advantages(), &[1.0, -1.0]);
        let g3 = GroupIndex::single(3).unwrap();
        assert!(leave_one_out(&[0.5; 3], &g3).unwrap().advantages().iter().all(|&x| x == 0.0));
        assert!(leave_one_out(&[1.0, 0.0], &GroupIndex::uniform(2, 1).unwrap()).is_err());
    }

    #[test]
    fn filtering() {
        let a = AdvantageBatch::from_values(vec![0.05, -0.5, 0.0, 0.25], BaselineKind::Group);
        let f = filter_by_threshold(&a, 0.1).unwrap();
        assert_eq!(f.kept(), &[false, true, false, true]);
        assert_eq!(f.advantages(), a.advantages());
        assert_eq!(f.filtered_fraction(), 0.5);
        assert_eq!(filter_by_threshold(&a, 0.0).unwrap().kept(), &[true, true, false, true]);
        assert_eq!(filter_by_threshold(&a, f64::INFINITY).unwrap().kept_count(), 0);
        assert!(filter_by_threshold(&a, -0.1).is_err());
        assert!(filter_by_threshold(&a, f64::NAN).is_err());
        // ties at exactly tau are dropped
        let tie = AdvantageBatch::from_values(vec![0.1, -0.1], BaselineKind::Group);
        assert_eq!(filter_by_threshold(&tie, 0.1).unwrap().kept_count(), 0);
    }

    fn rewards_and_groups() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        prop::collection::vec(1usize..6, 1..8).prop_flat_map(|sizes| {
            let n: usize = sizes.iter().sum();
            (prop::collection::vec(-3.0f64..3.0, n), Just(sizes))
        })
    }

    proptest! {
        #[test]
        fn group_sums_vanish((rewards, sizes) in rewards_and_groups()) {
            let g = GroupIndex::contiguous(&sizes).unwrap();
            let a = group_advantage(&rewards, &g).unwrap();
            for grp in g.groups() {
                let s: f64 = grp.iter().map(|&i| a.advantages()[i]).sum();
                prop_assert!(s.abs() < 1e-12);
            }
            let sp = single_path_advantage(&rewards).unwrap();
            prop_assert!(sp.advantages().iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn single_group_is_single_path(rewards in prop::collection::vec(-3.0f64..3.0, 1..20)) {
            let g = GroupIndex::single(rewards.len()).unwrap();
            let (grouped, single) = (group_advantage(&rewards, &g).unwrap(), single_path_advantage(&rewards).unwrap());
            prop_assert_eq!(grouped.advantages(), single.advantages());
        }

        #[test]
        fn normalization_ignores_offsets((rewards, sizes) in rewards_and_groups(), shift in -5.0f64..5.0) {
            let g = GroupIndex::contiguous(&sizes).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let a = normalize_std(&group_advantage(&rewards, &g).unwrap(), &g, 1e-3).unwrap();
            let b = normalize_std(&group_advantage(&shifted, &g).unwrap(), &g, 1e-3).unwrap();
            for (x, y) in a.advantages().iter().zip(b.advantages()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn filter_keeps_values((rewards, sizes) in rewards_and_groups(), tau in 0.0f64..2.0) {
            let g = GroupIndex::contiguous(&sizes).unwrap();
            let a = group_advantage(&rewards, &g).unwrap();
            let f = filter_by_threshold(&a, tau).unwrap();
            prop_assert_eq!(f.advantages(), a.advantages());
            for (adv, kept) in f.advantages().iter().zip(f.kept()) {
                prop_assert_eq!(*kept, adv.abs() > tau);
            }
        }
    }
}
