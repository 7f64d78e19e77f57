//! Frame selection policies and hierarchical task/format mixture planning.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::QaItem;
use crate::task::{strata, QaFormat, Task};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampling policy: n = {n} for a clip of {length} frames")]
    InvalidPolicy { n: usize, length: usize },
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("budget must be positive")]
    InvalidBudget,
    #[error("stratum {task}-{format} has positive weight but no items")]
    EmptyStratum { task: Task, format: QaFormat },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    #[serde(alias = "first_n")]
    First,
    #[serde(alias = "uniform_n")]
    Uniform,
}

impl FromStr for SamplingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" | "first_n" => Ok(SamplingKind::First),
            "uniform" | "uniform_n" => Ok(SamplingKind::Uniform),
            other => Err(format!("unknown policy `{other}` (first | uniform)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSamplingPolicy {
    pub kind: SamplingKind,
    pub n: usize,
}

impl FrameSamplingPolicy {
    pub fn first(n: usize) -> Self {
        Self {
            kind: SamplingKind::First,
            n,
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            kind: SamplingKind::Uniform,
            n,
        }
    }
}

/// Indices of the frames a policy selects from a clip of `length` frames.
///
/// Uniform selection spans the clip end to end: `floor(j * (length - 1) / (n - 1))`.
pub fn sample_frames(length: usize, policy: FrameSamplingPolicy) -> Result<Vec<usize>, SamplerError> {
    let n = policy.n;
    if n == 0 || n > length {
        return Err(SamplerError::InvalidPolicy { n, length });
    }
    Ok(match policy.kind {
        SamplingKind::First => (0..n).collect(),
        SamplingKind::Uniform if n == 1 => vec![0],
        SamplingKind::Uniform => (0..n).map(|j| j * (length - 1) / (n - 1)).collect(),
    })
}

/// Task ratios (alpha) and per-task format ratios (beta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub alpha_ar: f64,
    pub alpha_cr: f64,
    pub beta_binary: f64,
    pub beta_mc: f64,
    pub beta_oe: f64,
}

impl MixConfig {
    pub fn new(
        alpha_ar: f64,
        beta_binary: f64,
        beta_mc: f64,
        beta_oe: f64,
    ) -> Result<Self, SamplerError> {
        let mix = Self {
            alpha_ar,
            alpha_cr: 1.0 - alpha_ar,
            beta_binary,
            beta_mc,
            beta_oe,
        };
        mix.validate()?;
        Ok(mix)
    }

    /// The composition adopted after the three-stage search.
    pub fn optimized() -> Self {
        Self {
            alpha_ar: 0.8,
            alpha_cr: 0.2,
            beta_binary: 0.15,
            beta_mc: 0.05,
            beta_oe: 0.8,
        }
    }

    pub fn uniform() -> Self {
        Self {
            alpha_ar: 0.5,
            alpha_cr: 0.5,
            beta_binary: 1.0 / 3.0,
            beta_mc: 1.0 / 3.0,
            beta_oe: 1.0 / 3.0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, SamplerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SamplerError::InvalidMix(format!("{}: {e}", path.display())))?;
        let mix: Self = serde_json::from_str(&text)
            .map_err(|e| SamplerError::InvalidMix(format!("{}: {e}", path.display())))?;
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let all = [
            ("alpha_ar", self.alpha_ar),
            ("alpha_cr", self.alpha_cr),
            ("beta_binary", self.beta_binary),
            ("beta_mc", self.beta_mc),
            ("beta_oe", self.beta_oe),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(SamplerError::InvalidMix(format!("{name} = {v} outside [0, 1]")));
        }
        let alpha = self.alpha_ar + self.alpha_cr;
        if (alpha - 1.0).abs() > SUM_TOLERANCE {
            return Err(SamplerError::InvalidMix(format!("alpha sums to {alpha}")));
        }
        let beta = self.beta_binary + self.beta_mc + self.beta_oe;
        if (beta - 1.0).abs() > SUM_TOLERANCE {
            return Err(SamplerError::InvalidMix(format!("beta sums to {beta}")));
        }
        Ok(())
    }

    pub fn alpha(&self, task: Task) -> f64 {
        match task {
            Task::AR => self.alpha_ar,
            Task::CR => self.alpha_cr,
        }
    }

    pub fn beta(&self, format: QaFormat) -> f64 {
        match format {
            QaFormat::Binary => self.beta_binary,
            QaFormat::Mc => self.beta_mc,
            QaFormat::Oe => self.beta_oe,
        }
    }

    pub fn weight(&self, task: Task, format: QaFormat) -> f64 {
        self.alpha(task) * self.beta(format)
    }
}

/// Largest-remainder apportionment of `budget` over `weights` (which should
/// sum to one). Equal remainders go to the earlier index.
pub fn apportion(budget: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * budget as f64).collect();
    // the epsilon absorbs float error such as 0.8 * 0.15 * 1000 = 119.99..
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = budget.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| {
        let remainder = ((quotas[i] - counts[i] as f64) * 1e9).round() as i64;
        (std::cmp::Reverse(remainder), weights[i] <= 0.0, i)
    });
    for &i in order.iter().cycle().take(leftover) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub task: Task,
    pub format: QaFormat,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub seed: u64,
    pub budget: usize,
    pub target_counts: Vec<StratumCount>,
    /// Item ids in training order.
    pub entries: Vec<String>,
}

impl EpochPlan {
    pub fn count(&self, task: Task, format: QaFormat) -> usize {
        self.target_counts
            .iter()
            .find(|c| c.task == task && c.format == format)
            .map_or(0, |c| c.count)
    }
}

/// Per-stratum target counts for a mix and budget, in canonical stratum order.
pub fn target_counts(mix: &MixConfig, budget: usize) -> Vec<StratumCount> {
    let keys: Vec<(Task, QaFormat)> = strata().collect();
    let weights: Vec<f64> = keys.iter().map(|&(t, f)| mix.weight(t, f)).collect();
    keys.into_iter()
        .zip(apportion(budget, &weights))
        .map(|((task, format), count)| StratumCount {
            task,
            format,
            count,
        })
        .collect()
}

/// Draws `budget` items following the mix. Each stratum is sampled without
/// replacement first and topped up with replacement once exhausted; the
/// final order is a seeded shuffle.
pub fn plan_epoch(
    dataset: &[QaItem],
    mix: &MixConfig,
    budget: usize,
    seed: u64,
) -> Result<EpochPlan, SamplerError> {
    mix.validate()?;
    if budget == 0 {
        return Err(SamplerError::InvalidBudget);
    }
    let mut by_stratum: BTreeMap<(Task, QaFormat), Vec<&str>> = BTreeMap::new();
    for item in dataset {
        by_stratum
            .entry((item.task, item.format))
            .or_default()
            .push(item.item_id.as_str());
    }
    for (task, format) in strata() {
        if mix.weight(task, format) > 0.0 && !by_stratum.contains_key(&(task, format)) {
            return Err(SamplerError::EmptyStratum { task, format });
        }
    }

    let counts = target_counts(mix, budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(budget);
    for c in &counts {
        if c.count == 0 {
            continue;
        }
        let pool = by_stratum
            .get(&(c.task, c.format))
            .ok_or(SamplerError::EmptyStratum {
                task: c.task,
                format: c.format,
            })?;
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rng);
        entries.extend(shuffled.iter().take(c.count).map(|s| s.to_string()));
        for _ in pool.len()..c.count {
            entries.push(pool[rng.random_range(0..pool.len())].to_string());
        }
    }
    entries.shuffle(&mut rng);
    Ok(EpochPlan {
        seed,
        budget,
        target_counts: counts,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStage {
    TaskRatio,
    OeRatio,
    BinMcSplit,
}

impl FromStr for GridStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task_ratio" => Ok(GridStage::TaskRatio),
            "oe_ratio" => Ok(GridStage::OeRatio),
            "bin_mc_split" => Ok(GridStage::BinMcSplit),
            other => Err(format!(
                "unknown stage `{other}` (task_ratio | oe_ratio | bin_mc_split)"
            )),
        }
    }
}

/// Mixture configurations swept at each stage of the grid search.
pub fn enumerate_grid(stage: GridStage) -> Vec<MixConfig> {
    let third = 1.0 / 3.0;
    let build = |a: f64, b: f64, m: f64, o: f64| MixConfig {
        alpha_ar: a,
        alpha_cr: 1.0 - a,
        beta_binary: b,
        beta_mc: m,
        beta_oe: o,
    };
    match stage {
        GridStage::TaskRatio => [0.2, 0.4, 0.5, 0.6, 0.8]
            .into_iter()
            .map(|a| build(a, third, third, third))
            .collect(),
        GridStage::OeRatio => [(0.4, 0.2, 0.4), (0.2, 0.4, 0.4), (0.0, 0.4, 0.6), (0.0, 0.2, 0.8)]
            .into_iter()
            .map(|(b, m, o)| build(0.8, b, m, o))
            .collect(),
        GridStage::BinMcSplit => [(0.15, 0.05, 0.8), (0.10, 0.10, 0.8), (0.05, 0.15, 0.8)]
            .into_iter()
            .map(|(b, m, o)| build(0.8, b, m, o))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::{item_id, QaItem};

    #[test]
    fn uniform_eight_of_fourteen() {
        // floor(j * 13 / 7) for j = 0..7
        assert_eq!(
            sample_frames(14, FrameSamplingPolicy::uniform(8)).unwrap(),
            vec![0, 1, 3, 5, 7, 9, 11, 13]
        );
        assert_eq!(sample_frames(14, FrameSamplingPolicy::uniform(2)).unwrap(), vec![0, 13]);
        assert_eq!(sample_frames(14, FrameSamplingPolicy::uniform(1)).unwrap(), vec![0]);
        assert_eq!(sample_frames(14, FrameSamplingPolicy::first(3)).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn invalid_policies() {
        assert_eq!(
            sample_frames(14, FrameSamplingPolicy::uniform(15)),
            Err(SamplerError::InvalidPolicy { n: 15, length: 14 })
        );
        assert!(sample_frames(14, FrameSamplingPolicy::first(0)).is_err());
    }

    #[test]
    fn optimized_mix_counts() {
        let counts = target_counts(&MixConfig::optimized(), 1000);
        let get = |t, f| counts.iter().find(|c| c.task == t && c.format == f).unwrap().count;
        assert_eq!(get(Task::AR, QaFormat::Oe), 640);
        assert_eq!(get(Task::CR, QaFormat::Oe), 160);
        assert_eq!(get(Task::AR, QaFormat::Binary), 120);
        assert_eq!(get(Task::CR, QaFormat::Binary), 30);
        assert_eq!(get(Task::AR, QaFormat::Mc), 40);
        assert_eq!(get(Task::CR, QaFormat::Mc), 10);
    }

    #[test]
    fn small_budget_largest_remainder() {
        // 7 / 6 = 1.1667 per stratum: six floors of 1, one leftover to the first stratum
        let counts: Vec<usize> = target_counts(&MixConfig::uniform(), 7)
            .into_iter()
            .map(|c| c.count)
            .collect();
        assert_eq!(counts, vec![2, 1, 1, 1, 1, 1]);
        // 0.6, 0.3, 0.1 of 5 -> quotas 3.0, 1.5, 0.5
        assert_eq!(apportion(5, &[0.6, 0.3, 0.1]), vec![3, 2, 0]);
    }

    #[test]
    fn mix_validation() {
        assert!(MixConfig::new(0.8, 0.15, 0.05, 0.8).is_ok());
        assert!(MixConfig::new(0.8, 0.5, 0.5, 0.5).is_err());
        assert!(MixConfig::new(1.2, 0.2, 0.2, 0.6).is_err());
    }

    fn dataset(per_stratum: usize, skip: Option<(Task, QaFormat)>) -> Vec<QaItem> {
        let mut items = Vec::new();
        for (task, format) in strata() {
            if Some((task, format)) == skip {
                continue;
            }
            for k in 0..per_stratum {
                let clip = format!("c{k}");
                items.push(QaItem {
                    item_id: item_id(&clip, task, format, None),
                    clip_id: clip,
                    task,
                    format,
                    question: "q".into(),
                    options: None,
                    answer: "a".into(),
                    polarity: None,
                    distractor: None,
                });
            }
        }
        items
    }

    #[test]
    fn plan_matches_counts_and_is_deterministic() {
        let data = dataset(50, None);
        let plan = plan_epoch(&data, &MixConfig::optimized(), 1000, 3).unwrap();
        assert_eq!(plan.entries.len(), 1000);
        assert_eq!(plan, plan_epoch(&data, &MixConfig::optimized(), 1000, 3).unwrap());
        let lookup: BTreeMap<&str, &QaItem> = data.iter().map(|i| (i.item_id.as_str(), i)).collect();
        for c in &plan.target_counts {
            let n = plan
                .entries
                .iter()
                .filter(|e| {
                    let it = lookup[e.as_str()];
                    it.task == c.task && it.format == c.format
                })
                .count();
            assert_eq!(n, c.count);
        }
        assert_ne!(plan.entries, plan_epoch(&data, &MixConfig::optimized(), 1000, 4).unwrap().entries);
    }

    #[test]
    fn plan_without_replacement_when_possible() {
        let data = dataset(100, None);
        let plan = plan_epoch(&data, &MixConfig::uniform(), 60, 1).unwrap();
        let mut seen = plan.entries.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 60);
    }

    #[test]
    fn empty_stratum_with_weight() {
        let data = dataset(5, Some((Task::AR, QaFormat::Oe)));
        assert_eq!(
            plan_epoch(&data, &MixConfig::optimized(), 100, 0),
            Err(SamplerError::EmptyStratum { task: Task::AR, format: QaFormat::Oe })
        );
        // zero weight on the missing stratum is fine
        let mix = MixConfig::new(0.8, 0.5, 0.5, 0.0).unwrap();
        assert!(plan_epoch(&data, &mix, 100, 0).is_ok());
    }

    #[test]
    fn grid_stages() {
        let task = enumerate_grid(GridStage::TaskRatio);
        assert_eq!(task.len(), 5);
        assert!(task.iter().all(|m| m.validate().is_ok()));
        let oe = enumerate_grid(GridStage::OeRatio);
        assert_eq!(oe.len(), 4);
        assert!(oe.iter().all(|m| m.alpha_ar == 0.8 && m.validate().is_ok()));
        let split = enumerate_grid(GridStage::BinMcSplit);
        assert_eq!(split.len(), 3);
        assert!(split.iter().all(|m| m.beta_oe == 0.8 && m.validate().is_ok()));
    }
}
