//! Exact match and ROUGE-F1 scoring, and mean/std aggregation across runs.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::Prediction;
use crate::qa::QaItem;
use crate::task::{QaFormat, Task};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("n-gram order must be at least 1 (got {0})")]
    InvalidN(usize),
    #[error("prediction for unknown item `{0}`")]
    UnknownItem(String),
    #[error("duplicate prediction for item `{0}`")]
    DuplicatePrediction(String),
}

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn exact_match(pred: &str, reference: &str) -> u8 {
    u8::from(normalize(pred) == normalize(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramMode {
    /// Deduplicated n-gram sets.
    #[default]
    Set,
    /// Multisets with overlap clipped to the smaller count.
    Clipped,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F1 between a prediction and a reference.
///
/// Normalized-equal strings score 1 even when shorter than `n`; otherwise an
/// empty n-gram list or an empty overlap scores 0.
pub fn rouge_f1(pred: &str, reference: &str, n: usize, mode: NgramMode) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::InvalidN(n));
    }
    let (pred, reference) = (normalize(pred), normalize(reference));
    if pred == reference {
        return Ok(1.0);
    }
    let p_tokens: Vec<&str> = pred.split_whitespace().collect();
    let r_tokens: Vec<&str> = reference.split_whitespace().collect();
    let g = ngram_counts(&p_tokens, n);
    let r = ngram_counts(&r_tokens, n);
    if g.is_empty() || r.is_empty() {
        return Ok(0.0);
    }
    let (overlap, g_size, r_size) = match mode {
        NgramMode::Set => (
            g.keys().filter(|k| r.contains_key(*k)).count(),
            g.len(),
            r.len(),
        ),
        NgramMode::Clipped => (
            g.iter().map(|(k, c)| (*c).min(*r.get(k).unwrap_or(&0))).sum(),
            g.values().sum(),
            r.values().sum(),
        ),
    };
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / g_size as f64;
    let recall = overlap as f64 / r_size as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub task: Task,
    pub format: QaFormat,
    pub em: u8,
    pub rouge: f64,
    pub ngram_n: usize,
}

/// One score per prediction, in prediction order.
pub fn score(
    predictions: &[Prediction],
    dataset: &[QaItem],
    mode: NgramMode,
) -> Result<Vec<ScoreRecord>, MetricsError> {
    let by_id: HashMap<&str, &QaItem> = dataset.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut seen = HashSet::new();
    predictions
        .iter()
        .map(|p| {
            if !seen.insert(p.item_id.as_str()) {
                return Err(MetricsError::DuplicatePrediction(p.item_id.clone()));
            }
            let item = by_id
                .get(p.item_id.as_str())
                .ok_or_else(|| MetricsError::UnknownItem(p.item_id.clone()))?;
            let n = item.format.rouge_order();
            Ok(ScoreRecord {
                item_id: p.item_id.clone(),
                task: item.task,
                format: item.format,
                em: exact_match(&p.answer, &item.answer),
                rouge: rouge_f1(&p.answer, &item.answer, n, mode)?,
                ngram_n: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    TaskFormat,
    Task,
    Format,
    Overall,
}

impl Grouping {
    fn key(&self, r: &ScoreRecord) -> (Option<Task>, Option<QaFormat>) {
        match self {
            Grouping::TaskFormat => (Some(r.task), Some(r.format)),
            Grouping::Task => (Some(r.task), None),
            Grouping::Format => (None, Some(r.format)),
            Grouping::Overall => (None, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub task: Option<Task>,
    pub format: Option<QaFormat>,
    pub runs: usize,
    /// Items in the group summed over runs.
    pub n_items: usize,
    pub em_mean: f64,
    pub em_std: f64,
    pub rouge_mean: f64,
    pub rouge_std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-group mean of per-run means, with population std across runs. A
/// group absent from some run is aggregated over the runs that contain it.
pub fn aggregate(runs: &[Vec<ScoreRecord>], groupings: &[Grouping]) -> Vec<AggregateReport> {
    type Key = (Option<Task>, Option<QaFormat>);
    // key -> per-run (em means, rouge means, item count)
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for run in runs {
        let mut sums: BTreeMap<Key, (f64, f64, usize)> = BTreeMap::new();
        for record in run {
            for g in groupings {
                let entry = sums.entry(g.key(record)).or_default();
                entry.0 += f64::from(record.em);
                entry.1 += record.rouge;
                entry.2 += 1;
            }
        }
        for (key, (em, rouge, count)) in sums {
            let group = groups.entry(key).or_default();
            group.0.push(em / count as f64);
            group.1.push(rouge / count as f64);
            group.2 += count;
        }
    }
    groups
        .into_iter()
        .map(|((task, format), (em, rouge, n_items))| {
            let (em_mean, em_std) = mean_std(&em);
            let (rouge_mean, rouge_std) = mean_std(&rouge);
            AggregateReport {
                task,
                format,
                runs: em.len(),
                n_items,
                em_mean,
                em_std,
                rouge_mean,
                rouge_std,
            }
        })
        .collect()
}

/// Task-by-format table of `EM / ROUGE` percentages with std.
pub fn render_table(reports: &[AggregateReport]) -> String {
    let mut out = String::from("| Task | Metric | Binary | MC | OE |\n|---|---|---|---|---|\n");
    for task in Task::ALL {
        for (metric, pick) in [
            ("EM", (|r: &AggregateReport| (r.em_mean, r.em_std)) as fn(&AggregateReport) -> (f64, f64)),
            ("ROUGE", |r: &AggregateReport| (r.rouge_mean, r.rouge_std)),
        ] {
            let cells: Vec<String> = QaFormat::ALL
                .iter()
                .map(|f| {
                    reports
                        .iter()
                        .find(|r| r.task == Some(task) && r.format == Some(*f))
                        .map(|r| {
                            let (m, s) = pick(r);
                            format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
                        })
                        .unwrap_or_else(|| "-".to_string())
                })
                .collect();
            out.push_str(&format!("| {task} | {metric} | {} |\n", cells.join(" | ")));
        }
    }
    out
}
