//! Human-study workflow: annotation packets, adjudication, accuracy,
//! inter-annotator agreement and sample-size arithmetic.

pub mod server;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::bridge::Prediction;
use crate::ingest::Clip;
use crate::qa::QaItem;
use crate::task::{QaFormat, Task};

pub use store::{RatingStore, Study, SubmitRating};

/// Planning assumption for the per-item score spread.
pub const DEFAULT_SIGMA: f64 = 0.2;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("no prediction for item `{0}`")]
    MissingPrediction(String),
    #[error("no clip `{0}` for item")]
    MissingClip(String),
    #[error("adjudicator rating required for {} packet(s): {}", .0.len(), .0.join(", "))]
    AdjudicatorRequired(Vec<String>),
    #[error("annotator `{0}` rated the same packet twice")]
    AnnotatorCollision(String),
    #[error("ratings refer to different packets (`{0}` vs `{1}`)")]
    PacketMismatch(String, String),
    #[error("packets without two primary ratings: {}", .0.join(", "))]
    IncompleteRatings(Vec<String>),
    #[error("rating lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no ratings")]
    EmptyInput,
    #[error("confidence must lie strictly between 0 and 1 (got {0})")]
    InvalidConfidence(f64),
    #[error("sample size must be positive")]
    InvalidSampleSize,
    #[error("unknown packet `{0}`")]
    UnknownPacket(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingValue {
    Correct,
    Partial,
    Incorrect,
    Unclear,
}

impl RatingValue {
    pub const ALL: [RatingValue; 4] = [
        RatingValue::Correct,
        RatingValue::Partial,
        RatingValue::Incorrect,
        RatingValue::Unclear,
    ];

    /// Score credited to the answer; `None` for unclear.
    pub fn credit(&self) -> Option<f64> {
        match self {
            RatingValue::Correct => Some(1.0),
            RatingValue::Partial => Some(0.5),
            RatingValue::Incorrect => Some(0.0),
            RatingValue::Unclear => None,
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

impl FromStr for RatingValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correct" => Ok(RatingValue::Correct),
            "partial" => Ok(RatingValue::Partial),
            "incorrect" => Ok(RatingValue::Incorrect),
            "unclear" => Ok(RatingValue::Unclear),
            other => Err(format!("unknown rating `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterRole {
    #[default]
    Primary,
    Adjudicator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub packet_id: String,
    pub annotator_id: String,
    pub value: RatingValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default)]
    pub timestamp: u64,
    #[serde(default)]
    pub role: RaterRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPacket {
    pub packet_id: String,
    pub item_id: String,
    pub clip_id: String,
    pub model_tag: String,
    pub environment: String,
    pub task: Task,
    pub format: QaFormat,
    pub frames: Vec<String>,
    pub question: String,
    pub model_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_hints: Option<Vec<String>>,
}

/// One packet per item, ordered by `(model_tag, environment, item order)`
/// and numbered in that order. `hints` are attached per task when given.
pub fn export_packets(
    items: &[QaItem],
    predictions: &[Prediction],
    clips: &[Clip],
    hints: &BTreeMap<Task, Vec<String>>,
) -> Result<Vec<AnnotationPacket>, AnnotationError> {
    let preds: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.item_id.as_str(), p)).collect();
    let clip_map: HashMap<&str, &Clip> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let mut packets = Vec::with_capacity(items.len());
    for (order, item) in items.iter().enumerate() {
        let pred = preds
            .get(item.item_id.as_str())
            .ok_or_else(|| AnnotationError::MissingPrediction(item.item_id.clone()))?;
        let clip = clip_map
            .get(item.clip_id.as_str())
            .ok_or_else(|| AnnotationError::MissingClip(item.clip_id.clone()))?;
        packets.push((
            order,
            AnnotationPacket {
                packet_id: String::new(),
                item_id: item.item_id.clone(),
                clip_id: item.clip_id.clone(),
                model_tag: pred.model_tag.clone(),
                environment: clip.metadata.environment_id.clone(),
                task: item.task,
                format: item.format,
                frames: clip.frames.clone(),
                question: item.question.clone(),
                model_answer: pred.answer.clone(),
                reference_hints: hints.get(&item.task).cloned(),
            },
        ));
    }
    packets.sort_by(|(oa, a), (ob, b)| {
        (a.model_tag.as_str(), a.environment.as_str(), oa).cmp(&(
            b.model_tag.as_str(),
            b.environment.as_str(),
            ob,
        ))
    });
    Ok(packets
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut p))| {
            p.packet_id = format!("p{:06}", i + 1);
            p
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjudicationPath {
    Agreement,
    Adjudicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicatedLabel {
    pub packet_id: String,
    #[serde(rename = "final")]
    pub final_value: RatingValue,
    pub path: AdjudicationPath,
}

pub fn needs_adjudication(r1: RatingValue, r2: RatingValue) -> bool {
    r1 != r2 || r1 == RatingValue::Unclear
}

/// Agreement on a non-unclear value stands; anything else is decided by the
/// third rating.
pub fn adjudicate(
    r1: &Rating,
    r2: &Rating,
    r3: Option<&Rating>,
) -> Result<AdjudicatedLabel, AnnotationError> {
    if r1.packet_id != r2.packet_id {
        return Err(AnnotationError::PacketMismatch(
            r1.packet_id.clone(),
            r2.packet_id.clone(),
        ));
    }
    if r1.annotator_id == r2.annotator_id {
        return Err(AnnotationError::AnnotatorCollision(r1.annotator_id.clone()));
    }
    if !needs_adjudication(r1.value, r2.value) {
        return Ok(AdjudicatedLabel {
            packet_id: r1.packet_id.clone(),
            final_value: r1.value,
            path: AdjudicationPath::Agreement,
        });
    }
    let r3 = r3.ok_or_else(|| AnnotationError::AdjudicatorRequired(vec![r1.packet_id.clone()]))?;
    if r3.annotator_id == r1.annotator_id || r3.annotator_id == r2.annotator_id {
        return Err(AnnotationError::AnnotatorCollision(r3.annotator_id.clone()));
    }
    if r3.packet_id != r1.packet_id {
        return Err(AnnotationError::PacketMismatch(
            r1.packet_id.clone(),
            r3.packet_id.clone(),
        ));
    }
    Ok(AdjudicatedLabel {
        packet_id: r1.packet_id.clone(),
        final_value: r3.value,
        path: AdjudicationPath::Adjudicated,
    })
}

fn accuracy(values: impl IntoIterator<Item = RatingValue>, partial_credit: f64) -> Option<f64> {
    let (mut answerable, mut credit) = (0usize, 0.0);
    for v in values {
        match v {
            RatingValue::Correct => credit += 1.0,
            RatingValue::Partial => credit += partial_credit,
            RatingValue::Incorrect => {}
            RatingValue::Unclear => continue,
        }
        answerable += 1;
    }
    (answerable > 0).then(|| credit / answerable as f64)
}

/// Correct over answerable; `None` when every label is unclear.
pub fn strict_accuracy(labels: &[AdjudicatedLabel]) -> Option<f64> {
    accuracy(labels.iter().map(|l| l.final_value), 0.0)
}

/// Half credit for partial answers; `None` when every label is unclear.
pub fn graded_accuracy(labels: &[AdjudicatedLabel]) -> Option<f64> {
    accuracy(labels.iter().map(|l| l.final_value), 0.5)
}

/// Cohen's kappa over the four rating categories.
pub fn cohens_kappa(r1: &[RatingValue], r2: &[RatingValue]) -> Result<f64, AnnotationError> {
    if r1.len() != r2.len() {
        return Err(AnnotationError::LengthMismatch(r1.len(), r2.len()));
    }
    if r1.is_empty() {
        return Err(AnnotationError::EmptyInput);
    }
    let n = r1.len() as u64;
    let mut m1 = [0u64; 4];
    let mut m2 = [0u64; 4];
    let mut agree = 0u64;
    for (a, b) in r1.iter().zip(r2) {
        m1[a.index()] += 1;
        m2[b.index()] += 1;
        agree += u64::from(a == b);
    }
    let chance: u64 = m1.iter().zip(&m2).map(|(x, y)| x * y).sum();
    if chance == n * n {
        // both raters used one category throughout
        return Ok(1.0);
    }
    let p_o = agree as f64 / n as f64;
    let p_e = chance as f64 / (n * n) as f64;
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Two-sided normal quantile for a confidence level.
pub fn z_score(confidence: f64) -> Result<f64, AnnotationError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(AnnotationError::InvalidConfidence(confidence));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + confidence / 2.0))
}

/// `z * sigma / sqrt(n)`.
pub fn ci_width(sigma: f64, n: usize, confidence: f64) -> Result<f64, AnnotationError> {
    if n == 0 {
        return Err(AnnotationError::InvalidSampleSize);
    }
    Ok(z_score(confidence)? * sigma / (n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyGrouping {
    ModelEnv,
    ModelEnvTaskFormat,
    TaskFormat,
    Model,
    Overall,
}

impl FromStr for StudyGrouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model_env" => Ok(StudyGrouping::ModelEnv),
            "model_env_task_format" => Ok(StudyGrouping::ModelEnvTaskFormat),
            "task_format" => Ok(StudyGrouping::TaskFormat),
            "model" => Ok(StudyGrouping::Model),
            "overall" => Ok(StudyGrouping::Overall),
            other => Err(format!(
                "unknown grouping `{other}` (model_env | model_env_task_format | task_format | model | overall)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StudyKey {
    pub model_tag: Option<String>,
    pub environment: Option<String>,
    pub task: Option<Task>,
    pub format: Option<QaFormat>,
}

impl StudyGrouping {
    fn key(&self, p: &AnnotationPacket) -> StudyKey {
        let (m, e, t, f) = match self {
            StudyGrouping::ModelEnv => (true, true, false, false),
            StudyGrouping::ModelEnvTaskFormat => (true, true, true, true),
            StudyGrouping::TaskFormat => (false, false, true, true),
            StudyGrouping::Model => (true, false, false, false),
            StudyGrouping::Overall => (false, false, false, false),
        };
        StudyKey {
            model_tag: m.then(|| p.model_tag.clone()),
            environment: e.then(|| p.environment.clone()),
            task: t.then_some(p.task),
            format: f.then_some(p.format),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    #[serde(flatten)]
    pub key: StudyKey,
    pub n_packets: usize,
    pub n_agreement: usize,
    pub n_adjudicated: usize,
    /// Packets whose adjudicated label is not unclear.
    pub n_valid: usize,
    pub strict: Option<f64>,
    pub graded: Option<f64>,
    /// Four-category kappa between the two primary annotators.
    pub kappa: Option<f64>,
    /// Kappa restricted to packets neither primary marked unclear.
    pub kappa_valid: Option<f64>,
    pub ci_width: Option<f64>,
    /// Packets neither primary annotator marked unclear.
    pub n_valid_primary: usize,
    pub strict_primary: Option<f64>,
    pub graded_primary: Option<f64>,
}

/// Per-packet resolution used by the report.
struct Resolved<'a> {
    packet: &'a AnnotationPacket,
    first: RatingValue,
    second: RatingValue,
    label: AdjudicatedLabel,
}

/// Builds grouped study statistics from packets and the latest rating per
/// `(packet, annotator)`. Primary raters are ordered by annotator id.
pub fn study_report(
    packets: &[AnnotationPacket],
    ratings: &[Rating],
    grouping: StudyGrouping,
    sigma: f64,
    confidence: f64,
) -> Result<Vec<StudyReport>, AnnotationError> {
    z_score(confidence)?;
    let mut by_packet: HashMap<&str, (Vec<&Rating>, Option<&Rating>)> = HashMap::new();
    for r in ratings {
        let entry = by_packet.entry(r.packet_id.as_str()).or_default();
        match r.role {
            RaterRole::Primary => entry.0.push(r),
            RaterRole::Adjudicator => {
                if entry.1.is_none_or(|prev| prev.timestamp <= r.timestamp) {
                    entry.1 = Some(r);
                }
            }
        }
    }

    let mut incomplete = Vec::new();
    let mut needs_third = Vec::new();
    let mut resolved = Vec::with_capacity(packets.len());
    for packet in packets {
        let (mut primaries, third) = by_packet
            .get(packet.packet_id.as_str())
            .cloned()
            .unwrap_or_default();
        if primaries.len() != 2 {
            incomplete.push(packet.packet_id.clone());
            continue;
        }
        primaries.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
        match adjudicate(primaries[0], primaries[1], third) {
            Ok(label) => resolved.push(Resolved {
                packet,
                first: primaries[0].value,
                second: primaries[1].value,
                label,
            }),
            Err(AnnotationError::AdjudicatorRequired(_)) => {
                needs_third.push(packet.packet_id.clone())
            }
            Err(e) => return Err(e),
        }
    }
    if !incomplete.is_empty() {
        return Err(AnnotationError::IncompleteRatings(incomplete));
    }
    if !needs_third.is_empty() {
        return Err(AnnotationError::AdjudicatorRequired(needs_third));
    }

    let mut groups: BTreeMap<StudyKey, Vec<&Resolved>> = BTreeMap::new();
    for r in &resolved {
        groups.entry(grouping.key(r.packet)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let labels: Vec<AdjudicatedLabel> = members.iter().map(|r| r.label.clone()).collect();
            let n_valid = labels
                .iter()
                .filter(|l| l.final_value != RatingValue::Unclear)
                .count();
            let first: Vec<RatingValue> = members.iter().map(|r| r.first).collect();
            let second: Vec<RatingValue> = members.iter().map(|r| r.second).collect();
            let primary_valid: Vec<&&Resolved> = members
                .iter()
                .filter(|r| r.first != RatingValue::Unclear && r.second != RatingValue::Unclear)
                .collect();
            let pv_first: Vec<RatingValue> = primary_valid.iter().map(|r| r.first).collect();
            let pv_second: Vec<RatingValue> = primary_valid.iter().map(|r| r.second).collect();
            let pv_labels: Vec<AdjudicatedLabel> =
                primary_valid.iter().map(|r| r.label.clone()).collect();
            Ok(StudyReport {
                key,
                n_packets: members.len(),
                n_agreement: labels
                    .iter()
                    .filter(|l| l.path == AdjudicationPath::Agreement)
                    .count(),
                n_adjudicated: labels
                    .iter()
                    .filter(|l| l.path == AdjudicationPath::Adjudicated)
                    .count(),
                n_valid,
                strict: strict_accuracy(&labels),
                graded: graded_accuracy(&labels),
                kappa: cohens_kappa(&first, &second).ok(),
                kappa_valid: cohens_kappa(&pv_first, &pv_second).ok(),
                ci_width: if n_valid > 0 {
                    Some(ci_width(sigma, n_valid, confidence)?)
                } else {
                    None
                },
                n_valid_primary: primary_valid.len(),
                strict_primary: strict_accuracy(&pv_labels),
                graded_primary: graded_accuracy(&pv_labels),
            })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Environment-level table: valid pairs, kappa, graded / strict accuracy.
pub fn render_study_table(reports: &[StudyReport]) -> String {
    let mut out = String::from(
        "| Model | Env. | Valid QA Pairs | Valid (primary) | Cohen's kappa | Graded | Strict |\n|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.key.model_tag.as_deref().unwrap_or("all"),
            r.key.environment.as_deref().unwrap_or("all"),
            r.n_valid,
            r.n_valid_primary,
            r.kappa.map_or_else(|| "-".to_string(), |k| format!("{k:.2}")),
            pct(r.graded),
            pct(r.strict),
        ));
    }
    out
}
