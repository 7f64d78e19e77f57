//! Question/answer construction: binary, multiple-choice and open-ended items
//! for both recognition tasks.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::describe::{extract_label, Description, LabelVocabulary};
use crate::task::{QaFormat, Task};
use crate::util::derive_seed;

pub const ANSWER_YES: &str = "yes";
pub const ANSWER_NO: &str = "no";

#[derive(Debug, Error, PartialEq)]
pub enum QaError {
    #[error("{task} vocabulary has {size} label(s); binary questions need at least 2")]
    VocabularyTooSmall { task: Task, size: usize },
    #[error("label `{label}` is not in the {task} vocabulary")]
    LabelNotInVocabulary { task: Task, label: String },
    #[error("templates: {0}")]
    Templates(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pos,
    Neg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub item_id: String,
    pub clip_id: String,
    pub task: Task,
    pub format: QaFormat,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<String>,
}

pub fn item_id(clip_id: &str, task: Task, format: QaFormat, polarity: Option<Polarity>) -> String {
    match polarity {
        Some(Polarity::Pos) => format!("{clip_id}/{task}/{format}/pos"),
        Some(Polarity::Neg) => format!("{clip_id}/{task}/{format}/neg"),
        None => format!("{clip_id}/{task}/{format}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplates {
    pub binary_pos: String,
    pub binary_neg: String,
    pub mc: String,
    pub oe: String,
}

/// Question templates per task. `{label}` is replaced by the queried label,
/// `{options}` by the comma-separated option list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTemplates {
    #[serde(rename = "AR")]
    pub ar: TaskTemplates,
    #[serde(rename = "CR")]
    pub cr: TaskTemplates,
}

impl Default for QaTemplates {
    fn default() -> Self {
        Self {
            ar: TaskTemplates {
                binary_pos: "Does the video show the action {label}?".into(),
                binary_neg: "Does the video show the action {label}?".into(),
                mc: "Which action does the character perform in the video? Options: {options}."
                    .into(),
                oe: "Which action does the character perform in the video?".into(),
            },
            cr: TaskTemplates {
                binary_pos: "Is the character in the video {label}?".into(),
                binary_neg: "Is the character in the video {label}?".into(),
                mc: "Which character appears in the video? Options: {options}.".into(),
                oe: "Which character appears in the video?".into(),
            },
        }
    }
}

impl QaTemplates {
    pub fn from_file(path: &Path) -> Result<Self, QaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QaError::Templates(format!("{}: {e}", path.display())))?;
        let templates: Self = serde_json::from_str(&text)
            .map_err(|e| QaError::Templates(format!("{}: {e}", path.display())))?;
        for t in [&templates.ar, &templates.cr] {
            if !t.binary_pos.contains("{label}") || !t.binary_neg.contains("{label}") {
                return Err(QaError::Templates("binary templates need {label}".into()));
            }
            if !t.mc.contains("{options}") {
                return Err(QaError::Templates("mc templates need {options}".into()));
            }
        }
        Ok(templates)
    }

    pub fn for_task(&self, task: Task) -> &TaskTemplates {
        match task {
            Task::AR => &self.ar,
            Task::CR => &self.cr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaMode {
    /// One binary item per task with a seeded polarity: six items per clip.
    Sampled6,
    /// Both binary polarities per task: eight items per clip.
    Exhaustive8,
}

impl QaMode {
    pub fn items_per_clip(&self) -> usize {
        match self {
            QaMode::Sampled6 => 6,
            QaMode::Exhaustive8 => 8,
        }
    }
}

impl FromStr for QaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sampled6" => Ok(QaMode::Sampled6),
            "exhaustive8" => Ok(QaMode::Exhaustive8),
            other => Err(format!("unknown mode `{other}` (sampled6 | exhaustive8)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSpaces {
    pub ar: LabelVocabulary,
    pub cr: LabelVocabulary,
}

impl AnswerSpaces {
    pub fn get(&self, task: Task) -> &LabelVocabulary {
        match task {
            Task::AR => &self.ar,
            Task::CR => &self.cr,
        }
    }
}

impl Default for AnswerSpaces {
    fn default() -> Self {
        Self {
            ar: LabelVocabulary::default_ar(),
            cr: LabelVocabulary::default_cr(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct QaBuilder {
    pub templates: QaTemplates,
    pub shuffle_mc: bool,
}

fn require_member(task: Task, label: &str, vocab: &LabelVocabulary) -> Result<(), QaError> {
    if vocab.contains(label) {
        Ok(())
    } else {
        Err(QaError::LabelNotInVocabulary {
            task,
            label: label.to_string(),
        })
    }
}

impl QaBuilder {
    pub fn new(templates: QaTemplates, shuffle_mc: bool) -> Self {
        Self {
            templates,
            shuffle_mc,
        }
    }

    /// Positive item naming `label` and negative item naming a distractor
    /// drawn uniformly from the rest of the vocabulary.
    pub fn build_binary(
        &self,
        clip_id: &str,
        task: Task,
        label: &str,
        vocab: &LabelVocabulary,
        seed: u64,
    ) -> Result<(QaItem, QaItem), QaError> {
        if vocab.len() < 2 {
            return Err(QaError::VocabularyTooSmall {
                task,
                size: vocab.len(),
            });
        }
        require_member(task, label, vocab)?;
        let candidates: Vec<&String> = vocab.labels().iter().filter(|l| *l != label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let distractor = candidates[rng.random_range(0..candidates.len())].clone();
        let t = self.templates.for_task(task);
        let pos = QaItem {
            item_id: item_id(clip_id, task, QaFormat::Binary, Some(Polarity::Pos)),
            clip_id: clip_id.to_string(),
            task,
            format: QaFormat::Binary,
            question: t.binary_pos.replace("{label}", label),
            options: None,
            answer: ANSWER_YES.to_string(),
            polarity: Some(Polarity::Pos),
            distractor: None,
        };
        let neg = QaItem {
            item_id: item_id(clip_id, task, QaFormat::Binary, Some(Polarity::Neg)),
            question: t.binary_neg.replace("{label}", &distractor),
            answer: ANSWER_NO.to_string(),
            polarity: Some(Polarity::Neg),
            distractor: Some(distractor),
            ..pos.clone()
        };
        Ok((pos, neg))
    }

    pub fn build_mc(
        &self,
        clip_id: &str,
        task: Task,
        label: &str,
        vocab: &LabelVocabulary,
        seed: u64,
    ) -> Result<QaItem, QaError> {
        require_member(task, label, vocab)?;
        let mut options = vocab.labels().to_vec();
        if self.shuffle_mc {
            options.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let question = self
            .templates
            .for_task(task)
            .mc
            .replace("{options}", &options.join(", "));
        Ok(QaItem {
            item_id: item_id(clip_id, task, QaFormat::Mc, None),
            clip_id: clip_id.to_string(),
            task,
            format: QaFormat::Mc,
            question,
            options: Some(options),
            answer: label.to_string(),
            polarity: None,
            distractor: None,
        })
    }

    pub fn build_oe(&self, clip_id: &str, task: Task, label: &str) -> QaItem {
        QaItem {
            item_id: item_id(clip_id, task, QaFormat::Oe, None),
            clip_id: clip_id.to_string(),
            task,
            format: QaFormat::Oe,
            question: self.templates.for_task(task).oe.clone(),
            options: None,
            answer: label.to_string(),
            polarity: None,
            distractor: None,
        }
    }

    /// All items for one clip: AR before CR; binary, mc, oe within a task.
    /// Per-item seeds depend only on `(seed, clip_id, task, format)`.
    pub fn build_all(
        &self,
        d: &Description,
        spaces: &AnswerSpaces,
        mode: QaMode,
        seed: u64,
    ) -> Result<Vec<QaItem>, QaError> {
        let clip = d.clip_id.as_str();
        let mut items = Vec::with_capacity(mode.items_per_clip());
        for task in Task::ALL {
            let vocab = spaces.get(task);
            let label = extract_label(d, task);
            let t = task.as_str();
            let (pos, neg) =
                self.build_binary(clip, task, label, vocab, derive_seed(seed, &[clip, t, "binary"]))?;
            match mode {
                QaMode::Exhaustive8 => items.extend([pos, neg]),
                QaMode::Sampled6 => {
                    let mut rng = crate::util::rng_for(seed, &[clip, t, "polarity"]);
                    items.push(if rng.random_bool(0.5) { pos } else { neg });
                }
            }
            items.push(self.build_mc(clip, task, label, vocab, derive_seed(seed, &[clip, t, "mc"]))?);
            items.push(self.build_oe(clip, task, label));
        }
        Ok(items)
    }

    /// Builds the full dataset in description order (parallel per clip).
    pub fn build_dataset(
        &self,
        descriptions: &[Description],
        spaces: &AnswerSpaces,
        mode: QaMode,
        seed: u64,
    ) -> Result<Vec<QaItem>, QaError> {
        let per_clip: Result<Vec<Vec<QaItem>>, QaError> = descriptions
            .par_iter()
            .map(|d| self.build_all(d, spaces, mode, seed))
            .collect();
        Ok(per_clip?.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::describe::AR_LABELS;

    fn desc(clip: &str) -> Description {
        Description {
            clip_id: clip.into(),
            text: String::new(),
            action_label: "Evading Left".into(),
            character_label: "char_04".into(),
        }
    }

    #[test]
    fn binary_pair_shape() {
        let b = QaBuilder::default();
        let vocab = LabelVocabulary::default_ar();
        let (pos, neg) = b.build_binary("c", Task::AR, "Jumping Up", &vocab, 1).unwrap();
        assert_eq!(pos.answer, "yes");
        assert_eq!(neg.answer, "no");
        assert!(pos.question.contains("Jumping Up"));
        let d = neg.distractor.clone().unwrap();
        assert_ne!(d, "Jumping Up");
        assert!(neg.question.contains(&d));
        assert!(!neg.question.contains("Jumping Up"));
        assert_eq!(pos.item_id, "c/AR/binary/pos");
        assert_eq!(neg.item_id, "c/AR/binary/neg");
    }

    #[test]
    fn distractor_never_equals_label() {
        let b = QaBuilder::default();
        let vocab = LabelVocabulary::default_ar();
        for seed in 0..10_000 {
            let (_, neg) = b.build_binary("c", Task::AR, AR_LABELS[2], &vocab, seed).unwrap();
            assert_ne!(neg.distractor.as_deref(), Some(AR_LABELS[2]));
        }
    }

    #[test]
    fn too_small_vocabulary() {
        let b = QaBuilder::default();
        let vocab = LabelVocabulary::new(Task::CR, vec!["only".into()]).unwrap();
        assert_eq!(
            b.build_binary("c", Task::CR, "only", &vocab, 0).unwrap_err(),
            QaError::VocabularyTooSmall { task: Task::CR, size: 1 }
        );
    }

    #[test]
    fn mc_options_and_shuffle() {
        let vocab = LabelVocabulary::default_ar();
        let plain = QaBuilder::default()
            .build_mc("c", Task::AR, "Jumping Down", &vocab, 5)
            .unwrap();
        assert_eq!(plain.options.as_deref().unwrap(), vocab.labels());
        assert_eq!(
            plain.options.as_ref().unwrap().iter().filter(|o| *o == "Jumping Down").count(),
            1
        );
        assert!(plain.question.contains("Evading Backwards, Evading Forwards"));

        let shuffler = QaBuilder::new(QaTemplates::default(), true);
        let a = shuffler.build_mc("c", Task::AR, "Jumping Down", &vocab, 5).unwrap();
        let b = shuffler.build_mc("c", Task::AR, "Jumping Down", &vocab, 5).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.options.clone().unwrap();
        sorted.sort();
        let mut canonical = vocab.labels().to_vec();
        canonical.sort();
        assert_eq!(sorted, canonical);

        let cr = LabelVocabulary::default_cr();
        let item = QaBuilder::default().build_mc("c", Task::CR, "char_13", &cr, 0).unwrap();
        assert_eq!(item.options.unwrap().len(), 13);
    }

    #[test]
    fn mc_rejects_unknown_label() {
        let vocab = LabelVocabulary::default_ar();
        assert!(QaBuilder::default().build_mc("c", Task::AR, "Flying", &vocab, 0).is_err());
    }

    #[test]
    fn oe_items() {
        let b = QaBuilder::default();
        let item = b.build_oe("c", Task::AR, "Evading Left");
        assert_eq!(item.answer, "Evading Left");
        assert!(item.options.is_none());
        assert_eq!(item, b.build_oe("c", Task::AR, "Evading Left"));
        assert_eq!(b.build_oe("c", Task::CR, "char_02").answer, "char_02");
    }

    #[test]
    fn build_all_counts_and_order() {
        let b = QaBuilder::default();
        let spaces = AnswerSpaces::default();
        let six = b.build_all(&desc("c1"), &spaces, QaMode::Sampled6, 9).unwrap();
        assert_eq!(six.len(), 6);
        let layout: Vec<(Task, QaFormat)> = six.iter().map(|i| (i.task, i.format)).collect();
        assert_eq!(
            layout,
            crate::task::strata().collect::<Vec<_>>()
        );
        let eight = b.build_all(&desc("c1"), &spaces, QaMode::Exhaustive8, 9).unwrap();
        assert_eq!(eight.len(), 8);
        for task in Task::ALL {
            assert_eq!(
                eight.iter().filter(|i| i.task == task && i.format == QaFormat::Binary).count(),
                2
            );
        }
    }

    #[test]
    fn sampled_polarity_is_seeded_and_varied() {
        let b = QaBuilder::default();
        let spaces = AnswerSpaces::default();
        let mut yes = 0;
        for i in 0..200 {
            let items = b.build_all(&desc(&format!("c{i}")), &spaces, QaMode::Sampled6, 1).unwrap();
            let again = b.build_all(&desc(&format!("c{i}")), &spaces, QaMode::Sampled6, 1).unwrap();
            assert_eq!(items, again);
            yes += items.iter().filter(|i| i.answer == "yes").count();
        }
        // 400 binary items, fair coin
        assert!((120..=280).contains(&yes), "yes count {yes}");
    }

    #[test]
    fn template_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, serde_json::to_string(&QaTemplates::default()).unwrap()).unwrap();
        assert_eq!(QaTemplates::from_file(&path).unwrap(), QaTemplates::default());
        let mut bad = QaTemplates::default();
        bad.cr.mc = "pick one".into();
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(QaTemplates::from_file(&path).is_err());
    }
}
