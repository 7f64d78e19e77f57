//! Clip descriptions and ground-truth labels derived from control logs and metadata.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Button, Clip, ControlSample, SessionMetadata};
use crate::task::Task;

pub const AR_LABELS: [&str; 8] = [
    "Evading Backwards",
    "Evading Forwards",
    "Evading Left",
    "Evading Right",
    "Jumping Down",
    "Jumping on the Level",
    "Jumping Up",
    "Mounting Hoverboard",
];

pub const CR_VOCABULARY_SIZE: usize = 13;

/// Summed elevation change beyond which a jump counts as up or down.
pub const ELEVATION_THRESHOLD: f64 = 0.5;

const DESCRIPTION_TEMPLATE: &str = "The character {character} is {action_phrase}.";

#[derive(Debug, Error, PartialEq)]
pub enum DescribeError {
    #[error("clip {clip_id} has no labelable action: {reason}")]
    Unlabelable { clip_id: String, reason: String },
    #[error("character id {0:?} is not in the configured vocabulary")]
    VocabularyViolation(Option<String>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub task: Task,
    labels: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(task: Task, labels: Vec<String>) -> Result<Self, DescribeError> {
        if labels.is_empty() {
            return Err(DescribeError::InvalidVocabulary(format!("{task} vocabulary is empty")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(DescribeError::InvalidVocabulary(format!(
                "{task} vocabulary repeats `{dup}`"
            )));
        }
        Ok(Self { task, labels })
    }

    pub fn default_ar() -> Self {
        Self::new(Task::AR, AR_LABELS.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Thirteen placeholder character slots, `char_01` .. `char_13`.
    pub fn default_cr() -> Self {
        Self::new(
            Task::CR,
            (1..=CR_VOCABULARY_SIZE).map(|i| format!("char_{i:02}")).collect(),
        )
        .unwrap()
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::AR => Self::default_ar(),
            Task::CR => Self::default_cr(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forwards,
    Backwards,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Button(Button),
    /// Summed elevation change strictly above the value.
    ElevationAbove(f64),
    /// Summed elevation change strictly below the value.
    ElevationBelow(f64),
    DominantAxis(Direction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub when: Vec<Predicate>,
    pub label: String,
}

/// Ordered rule cascade; the first rule whose predicates all hold wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRules {
    pub rules: Vec<Rule>,
}

impl Default for ActionRules {
    fn default() -> Self {
        use Predicate::*;
        let rule = |when: Vec<Predicate>, label: &str| Rule {
            when,
            label: label.to_string(),
        };
        Self {
            rules: vec![
                rule(vec![Button(crate::ingest::Button::Mount)], "Mounting Hoverboard"),
                rule(
                    vec![Button(crate::ingest::Button::Jump), ElevationAbove(ELEVATION_THRESHOLD)],
                    "Jumping Up",
                ),
                rule(
                    vec![Button(crate::ingest::Button::Jump), ElevationBelow(-ELEVATION_THRESHOLD)],
                    "Jumping Down",
                ),
                rule(vec![Button(crate::ingest::Button::Jump)], "Jumping on the Level"),
                rule(vec![DominantAxis(Direction::Forwards)], "Evading Forwards"),
                rule(vec![DominantAxis(Direction::Backwards)], "Evading Backwards"),
                rule(vec![DominantAxis(Direction::Left)], "Evading Left"),
                rule(vec![DominantAxis(Direction::Right)], "Evading Right"),
            ],
        }
    }
}

impl ActionRules {
    pub fn from_file(path: &Path) -> Result<Self, DescribeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DescribeError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| DescribeError::InvalidRules(format!("{}: {e}", path.display())))
    }

    fn check_labels(&self, vocab: &LabelVocabulary) -> Result<(), DescribeError> {
        match self.rules.iter().find(|r| !vocab.contains(&r.label)) {
            Some(r) => Err(DescribeError::InvalidRules(format!(
                "rule label `{}` is not an action label",
                r.label
            ))),
            None => Ok(()),
        }
    }
}

/// Clip-level summary of a control window.
#[derive(Debug, Clone, PartialEq)]
struct Motion {
    buttons: BTreeSet<Button>,
    elevation: f64,
    mean_x: f64,
    mean_y: f64,
    mean_abs_x: f64,
    mean_abs_y: f64,
}

impl Motion {
    fn of(controls: &[ControlSample]) -> Self {
        let n = controls.len().max(1) as f64;
        let mut m = Motion {
            buttons: BTreeSet::new(),
            elevation: 0.0,
            mean_x: 0.0,
            mean_y: 0.0,
            mean_abs_x: 0.0,
            mean_abs_y: 0.0,
        };
        for c in controls {
            m.buttons.extend(c.buttons.iter().copied());
            m.elevation += c.elevation_delta.unwrap_or(0.0);
            m.mean_x += c.stick_x / n;
            m.mean_y += c.stick_y / n;
            m.mean_abs_x += c.stick_x.abs() / n;
            m.mean_abs_y += c.stick_y.abs() / n;
        }
        m
    }

    /// Direction of the axis with the larger mean magnitude (ties go to the
    /// forward/backward axis), signed by that axis' mean.
    fn dominant(&self) -> Option<Direction> {
        if self.mean_abs_x > self.mean_abs_y {
            match self.mean_x {
                x if x < 0.0 => Some(Direction::Left),
                x if x > 0.0 => Some(Direction::Right),
                _ => None,
            }
        } else {
            match self.mean_y {
                y if y > 0.0 => Some(Direction::Forwards),
                y if y < 0.0 => Some(Direction::Backwards),
                _ => None,
            }
        }
    }

    fn holds(&self, p: &Predicate) -> bool {
        match p {
            Predicate::Button(b) => self.buttons.contains(b),
            Predicate::ElevationAbove(t) => self.elevation > *t,
            Predicate::ElevationBelow(t) => self.elevation < *t,
            Predicate::DominantAxis(d) => self.dominant() == Some(*d),
        }
    }
}

pub fn derive_action_label(
    controls: &[ControlSample],
    rules: &ActionRules,
) -> Result<String, DescribeError> {
    let unlabelable = |reason: &str| DescribeError::Unlabelable {
        clip_id: String::new(),
        reason: reason.to_string(),
    };
    if controls.is_empty() {
        return Err(unlabelable("no control samples"));
    }
    if controls.iter().all(ControlSample::is_idle) {
        return Err(unlabelable("all sticks zero and no buttons"));
    }
    let motion = Motion::of(controls);
    rules
        .rules
        .iter()
        .find(|rule| rule.when.iter().all(|p| motion.holds(p)))
        .map(|rule| rule.label.clone())
        .ok_or_else(|| unlabelable("no rule matched"))
}

/// Maps `character_id` through `aliases` (identity when absent) and checks
/// membership in `vocab`.
pub fn derive_character_label(
    m: &SessionMetadata,
    vocab: &LabelVocabulary,
    aliases: &BTreeMap<String, String>,
) -> Result<String, DescribeError> {
    let id = m
        .character_id
        .as_ref()
        .ok_or(DescribeError::VocabularyViolation(None))?;
    let label = aliases.get(id).unwrap_or(id);
    if vocab.contains(label) {
        Ok(label.clone())
    } else {
        Err(DescribeError::VocabularyViolation(Some(id.clone())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub clip_id: String,
    pub text: String,
    pub action_label: String,
    pub character_label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhraseRecord {
    label: String,
    phrase: String,
}

/// Loads a phrase table: one `{"label": .., "phrase": ..}` record per line.
pub fn load_phrase_table(path: &Path) -> Result<BTreeMap<String, String>, DescribeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DescribeError::Io(format!("{}: {e}", path.display())))?;
    let mut table = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PhraseRecord = serde_json::from_str(line).map_err(|e| {
            DescribeError::Io(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        table.insert(rec.label, rec.phrase);
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct Describer {
    pub rules: ActionRules,
    pub phrases: BTreeMap<String, String>,
    pub ar: LabelVocabulary,
    pub cr: LabelVocabulary,
    pub character_aliases: BTreeMap<String, String>,
}

impl Default for Describer {
    fn default() -> Self {
        Self {
            rules: ActionRules::default(),
            phrases: BTreeMap::new(),
            ar: LabelVocabulary::default_ar(),
            cr: LabelVocabulary::default_cr(),
            character_aliases: BTreeMap::new(),
        }
    }
}

impl Describer {
    pub fn new(
        rules: ActionRules,
        ar: LabelVocabulary,
        cr: LabelVocabulary,
    ) -> Result<Self, DescribeError> {
        rules.check_labels(&ar)?;
        Ok(Self {
            rules,
            ar,
            cr,
            ..Self::default()
        })
    }

    pub fn vocabulary(&self, task: Task) -> &LabelVocabulary {
        match task {
            Task::AR => &self.ar,
            Task::CR => &self.cr,
        }
    }

    fn phrase(&self, label: &str) -> String {
        self.phrases
            .get(label)
            .cloned()
            .unwrap_or_else(|| label.to_lowercase())
    }

    pub fn describe(&self, clip: &Clip) -> Result<Description, DescribeError> {
        let action = derive_action_label(&clip.controls, &self.rules).map_err(|e| match e {
            DescribeError::Unlabelable { reason, .. } => DescribeError::Unlabelable {
                clip_id: clip.clip_id.clone(),
                reason,
            },
            other => other,
        })?;
        let character = derive_character_label(&clip.metadata, &self.cr, &self.character_aliases)?;
        let text = DESCRIPTION_TEMPLATE
            .replace("{character}", &character)
            .replace("{action_phrase}", &self.phrase(&action));
        Ok(Description {
            clip_id: clip.clip_id.clone(),
            text,
            action_label: action,
            character_label: character,
        })
    }

    /// Describes every clip, skipping unlabelable ones. Returns the
    /// descriptions in clip order and the ids of the skipped clips.
    pub fn describe_all(
        &self,
        clips: &[Clip],
    ) -> Result<(Vec<Description>, Vec<String>), DescribeError> {
        let mut out = Vec::with_capacity(clips.len());
        let mut skipped = Vec::new();
        for clip in clips {
            match self.describe(clip) {
                Ok(d) => out.push(d),
                Err(DescribeError::Unlabelable { clip_id, .. }) => skipped.push(clip_id),
                Err(e) => return Err(e),
            }
        }
        Ok((out, skipped))
    }
}

/// Restricts `configured` to the labels observed in `dataset` (canonical
/// order kept), or returns it whole when `full` is set.
pub fn answer_space(
    dataset: &[Description],
    task: Task,
    configured: &LabelVocabulary,
    full: bool,
) -> Result<LabelVocabulary, DescribeError> {
    if dataset.is_empty() {
        return Err(DescribeError::EmptyDataset);
    }
    if full {
        return Ok(configured.clone());
    }
    let observed: HashSet<&str> = dataset.iter().map(|d| extract_label(d, task)).collect();
    let labels = configured
        .labels()
        .iter()
        .filter(|l| observed.contains(l.as_str()))
        .cloned()
        .collect();
    LabelVocabulary::new(task, labels)
}

pub fn extract_label(d: &Description, task: Task) -> &str {
    match task {
        Task::AR => &d.action_label,
        Task::CR => &d.character_label,
    }
}
