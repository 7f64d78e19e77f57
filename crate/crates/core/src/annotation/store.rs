//! Append-only rating log and the study workflow served to annotators.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    needs_adjudication, study_report, AnnotationError, AnnotationPacket, RaterRole, Rating,
    RatingValue, StudyGrouping, StudyReport,
};

/// Latest rating per `(packet_id, annotator_id)`, optionally mirrored to an
/// append-only JSONL log that is replayed on open.
#[derive(Debug, Default)]
pub struct RatingStore {
    latest: BTreeMap<(String, String), Rating>,
    log_path: Option<PathBuf>,
    superseded: usize,
}

impl RatingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log-backed store, replaying existing records.
    pub fn open(path: &Path) -> Result<Self, AnnotationError> {
        let mut store = Self::default();
        if path.exists() {
            for rating in read_ratings(path)? {
                store.apply(rating);
            }
        }
        store.log_path = Some(path.to_path_buf());
        Ok(store)
    }

    fn apply(&mut self, rating: Rating) -> bool {
        let key = (rating.packet_id.clone(), rating.annotator_id.clone());
        match self.latest.get(&key) {
            Some(prev) if prev.timestamp > rating.timestamp => false,
            Some(prev) => {
                log::info!(
                    "rating for {} by {} superseded ({:?} -> {:?})",
                    key.0,
                    key.1,
                    prev.value,
                    rating.value
                );
                self.superseded += 1;
                self.latest.insert(key, rating);
                true
            }
            None => {
                self.latest.insert(key, rating);
                true
            }
        }
    }

    /// Records a rating; an existing rating for the same key is replaced
    /// unless it carries a later timestamp.
    pub fn upsert(&mut self, rating: Rating) -> Result<bool, AnnotationError> {
        if let Some(path) = &self.log_path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| AnnotationError::Io(format!("{}: {e}", path.display())))?;
            let mut line = serde_json::to_vec(&rating).expect("rating serializes");
            line.push(b'\n');
            file.write_all(&line)
                .map_err(|e| AnnotationError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(self.apply(rating))
    }

    pub fn get(&self, packet_id: &str, annotator_id: &str) -> Option<&Rating> {
        self.latest
            .get(&(packet_id.to_string(), annotator_id.to_string()))
    }

    pub fn for_packet(&self, packet_id: &str) -> Vec<&Rating> {
        self.latest
            .range((packet_id.to_string(), String::new())..)
            .take_while(|((p, _), _)| p == packet_id)
            .map(|(_, r)| r)
            .collect()
    }

    pub fn ratings(&self) -> Vec<Rating> {
        self.latest.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn superseded(&self) -> usize {
        self.superseded
    }
}

pub fn read_ratings(path: &Path) -> Result<Vec<Rating>, AnnotationError> {
    crate::util::read_records(path)
        .map(|(_, r)| r)
        .map_err(|e| AnnotationError::Io(e.to_string()))
}

/// Body of a rating submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRating {
    pub packet_id: String,
    pub annotator_id: String,
    pub value: RatingValue,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub role: RaterRole,
    /// Defaults to the current wall-clock time in ms.
    #[serde(default)]
    pub timestamp: Option<u64>,
    /// Replace an existing rating by the same annotator instead of conflicting.
    #[serde(default)]
    pub supersede: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub packet: AnnotationPacket,
    pub ratings: Vec<Rating>,
}

/// Packets plus their ratings, with the submission rules of the study.
#[derive(Debug)]
pub struct Study {
    packets: BTreeMap<String, AnnotationPacket>,
    store: RatingStore,
    pub sigma: f64,
    pub confidence: f64,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Study {
    pub fn new(packets: Vec<AnnotationPacket>, store: RatingStore) -> Self {
        Self {
            packets: packets.into_iter().map(|p| (p.packet_id.clone(), p)).collect(),
            store,
            sigma: super::DEFAULT_SIGMA,
            confidence: super::DEFAULT_CONFIDENCE,
        }
    }

    pub fn packet(&self, id: &str) -> Option<&AnnotationPacket> {
        self.packets.get(id)
    }

    pub fn packets(&self) -> Vec<AnnotationPacket> {
        self.packets.values().cloned().collect()
    }

    pub fn store(&self) -> &RatingStore {
        &self.store
    }

    fn primaries(&self, packet_id: &str) -> Vec<&Rating> {
        self.store
            .for_packet(packet_id)
            .into_iter()
            .filter(|r| r.role == RaterRole::Primary)
            .collect()
    }

    fn awaiting_adjudication(&self, packet_id: &str) -> bool {
        let ratings = self.store.for_packet(packet_id);
        let primaries: Vec<_> = ratings.iter().filter(|r| r.role == RaterRole::Primary).collect();
        primaries.len() == 2
            && needs_adjudication(primaries[0].value, primaries[1].value)
            && !ratings.iter().any(|r| r.role == RaterRole::Adjudicator)
    }

    /// First packet (by id) this annotator has not rated that still lacks
    /// two primary ratings.
    pub fn next_packet(&self, annotator_id: &str) -> Option<&AnnotationPacket> {
        self.packets.values().find(|p| {
            let ratings = self.store.for_packet(&p.packet_id);
            !ratings.iter().any(|r| r.annotator_id == annotator_id)
                && ratings.iter().filter(|r| r.role == RaterRole::Primary).count() < 2
        })
    }

    pub fn adjudication_queue(&self) -> Vec<QueueEntry> {
        self.packets
            .values()
            .filter(|p| self.awaiting_adjudication(&p.packet_id))
            .map(|p| QueueEntry {
                packet: p.clone(),
                ratings: self.store.for_packet(&p.packet_id).into_iter().cloned().collect(),
            })
            .collect()
    }

    pub fn submit(&mut self, body: SubmitRating) -> Result<Rating, AnnotationError> {
        if !self.packets.contains_key(&body.packet_id) {
            return Err(AnnotationError::UnknownPacket(body.packet_id));
        }
        let existing = self.store.get(&body.packet_id, &body.annotator_id).cloned();
        if let Some(prev) = &existing {
            if prev.role != body.role {
                return Err(AnnotationError::AnnotatorCollision(body.annotator_id));
            }
            if !body.supersede {
                return Err(AnnotationError::Conflict(format!(
                    "{} already rated {}",
                    body.annotator_id, body.packet_id
                )));
            }
        }
        match body.role {
            RaterRole::Primary => {
                let others = self
                    .primaries(&body.packet_id)
                    .iter()
                    .filter(|r| r.annotator_id != body.annotator_id)
                    .count();
                if others >= 2 {
                    return Err(AnnotationError::Conflict(format!(
                        "{} already has two primary ratings",
                        body.packet_id
                    )));
                }
            }
            RaterRole::Adjudicator => {
                if existing.is_none() && !self.awaiting_adjudication(&body.packet_id) {
                    return Err(AnnotationError::Conflict(format!(
                        "{} is not awaiting adjudication",
                        body.packet_id
                    )));
                }
            }
        }
        let rating = Rating {
            packet_id: body.packet_id,
            annotator_id: body.annotator_id,
            value: body.value,
            comment: body.comment,
            timestamp: body
                .timestamp
                .unwrap_or_else(|| existing.map_or(0, |p| p.timestamp + 1).max(now_ms())),
            role: body.role,
        };
        self.store.upsert(rating.clone())?;
        Ok(rating)
    }

    /// Bulk import without workflow checks; later timestamps win.
    pub fn import(&mut self, ratings: Vec<Rating>) -> Result<usize, AnnotationError> {
        let mut applied = 0;
        for r in ratings {
            if self.store.upsert(r)? {
                applied += 1;
            }
        }
        Ok(applied)
    }

    pub fn report(&self, grouping: StudyGrouping) -> Result<Vec<StudyReport>, AnnotationError> {
        study_report(
            &self.packets(),
            &self.store.ratings(),
            grouping,
            self.sigma,
            self.confidence,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{QaFormat, Task};

    fn packet(id: &str) -> AnnotationPacket {
        AnnotationPacket {
            packet_id: id.into(),
            item_id: id.into(),
            clip_id: "c".into(),
            model_tag: "m".into(),
            environment: "A".into(),
            task: Task::CR,
            format: QaFormat::Binary,
            frames: vec!["f".into()],
            question: "q".into(),
            model_answer: "yes".into(),
            reference_hints: None,
        }
    }

    fn submit(who: &str, packet: &str, value: RatingValue) -> SubmitRating {
        SubmitRating {
            packet_id: packet.into(),
            annotator_id: who.into(),
            value,
            comment: None,
            role: RaterRole::Primary,
            timestamp: Some(1),
            supersede: false,
        }
    }

    #[test]
    fn queue_and_conflicts() {
        let mut study = Study::new(vec![packet("p1"), packet("p2")], RatingStore::in_memory());
        assert_eq!(study.next_packet("a").unwrap().packet_id, "p1");
        study.submit(submit("a", "p1", RatingValue::Correct)).unwrap();
        assert_eq!(study.next_packet("a").unwrap().packet_id, "p2");
        assert!(matches!(
            study.submit(submit("a", "p1", RatingValue::Incorrect)),
            Err(AnnotationError::Conflict(_))
        ));
        study.submit(submit("b", "p1", RatingValue::Incorrect)).unwrap();
        assert_eq!(study.next_packet("c").unwrap().packet_id, "p2");
        assert!(matches!(
            study.submit(submit("c", "p1", RatingValue::Correct)),
            Err(AnnotationError::Conflict(_))
        ));
        assert!(matches!(
            study.submit(submit("a", "nope", RatingValue::Correct)),
            Err(AnnotationError::UnknownPacket(_))
        ));

        let queue = study.adjudication_queue();
        assert_eq!(queue.len(), 1);
        assert_eq!(queue[0].packet.packet_id, "p1");

        let adjudicate = |who: &str| SubmitRating {
            role: RaterRole::Adjudicator,
            ..submit(who, "p1", RatingValue::Partial)
        };
        assert!(study.submit(adjudicate("a")).is_err());
        study.submit(adjudicate("boss")).unwrap();
        assert!(study.adjudication_queue().is_empty());
        assert!(matches!(
            study.submit(SubmitRating { role: RaterRole::Adjudicator, ..submit("boss", "p2", RatingValue::Correct) }),
            Err(AnnotationError::Conflict(_))
        ));
    }

    #[test]
    fn supersede_keeps_latest() {
        let mut study = Study::new(vec![packet("p1")], RatingStore::in_memory());
        study.submit(submit("a", "p1", RatingValue::Correct)).unwrap();
        let newer = SubmitRating {
            supersede: true,
            timestamp: Some(5),
            ..submit("a", "p1", RatingValue::Unclear)
        };
        study.submit(newer).unwrap();
        assert_eq!(study.store().get("p1", "a").unwrap().value, RatingValue::Unclear);
        assert_eq!(study.store().superseded(), 1);
        assert_eq!(study.store().len(), 1);
    }

    #[test]
    fn log_replays_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        {
            let mut study = Study::new(vec![packet("p1")], RatingStore::open(&path).unwrap());
            study.submit(submit("a", "p1", RatingValue::Correct)).unwrap();
        }
        let store = RatingStore::open(&path).unwrap();
        assert_eq!(store.get("p1", "a").unwrap().value, RatingValue::Correct);
    }

    #[test]
    fn older_timestamp_does_not_override() {
        let mut store = RatingStore::in_memory();
        let mk = |ts, value| Rating {
            packet_id: "p".into(),
            annotator_id: "a".into(),
            value,
            comment: None,
            timestamp: ts,
            role: RaterRole::Primary,
        };
        assert!(store.upsert(mk(10, RatingValue::Correct)).unwrap());
        assert!(!store.upsert(mk(3, RatingValue::Incorrect)).unwrap());
        assert_eq!(store.get("p", "a").unwrap().value, RatingValue::Correct);
    }
}
