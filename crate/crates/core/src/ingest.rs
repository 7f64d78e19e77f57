//! Session loading, validation, synchronization and segmentation into clips.
//!
//! A session manifest is a single JSON object:
//!
//! ```json
//! {
//!   "session_id": "s0001",
//!   "fps": 60,
//!   "frames": ["frames/000000.png", "frames/000001.png"],
//!   "controls": "controls.jsonl",
//!   "metadata": {"character_id": "char_03", "environment_id": "A",
//!                "source_kind": "human_gameplay"}
//! }
//! ```
//!
//! Paths are resolved relative to the manifest's directory. The control log
//! holds one JSON record per line.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CLIP_LENGTH: usize = 14;
pub const DEFAULT_SYNC_TOLERANCE: usize = 2;
/// Rollouts showing more characters than this are excluded from study sets.
pub const MAX_CHARACTERS: u32 = 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}{}{}: {message}",
        line.map(|l| format!(":{l}")).unwrap_or_default(),
        field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    MalformedManifest {
        path: PathBuf,
        line: Option<usize>,
        field: Option<String>,
        message: String,
    },
    #[error("character id {character_id:?} is not in the configured vocabulary")]
    VocabularyViolation { character_id: Option<String> },
    #[error("invalid clip length {length} for a session of {frame_count} frames")]
    InvalidLength { length: usize, frame_count: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Button {
    Jump,
    Mount,
    Evade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub timestep: u64,
    pub stick_x: f64,
    pub stick_y: f64,
    #[serde(default)]
    pub buttons: BTreeSet<Button>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation_delta: Option<f64>,
}

impl ControlSample {
    pub fn is_idle(&self) -> bool {
        self.stick_x == 0.0 && self.stick_y == 0.0 && self.buttons.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HumanGameplay,
    ModelRollout,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutFlags {
    pub no_visible_agents: bool,
    pub stationary_agents: bool,
    pub early_uninformative: bool,
    pub obstructed: bool,
    pub character_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetadata {
    #[serde(default)]
    pub character_id: Option<String>,
    pub environment_id: String,
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout_flags: Option<RolloutFlags>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    /// Directory the frame paths are relative to.
    pub frame_root: PathBuf,
    pub frames: Vec<PathBuf>,
    pub controls: Vec<ControlSample>,
    pub metadata: SessionMetadata,
    pub fps: u32,
}

impl Session {
    pub fn frame_count(&self) -> usize {
        self.frames.len().min(self.controls.len())
    }

    /// Truncates the longer of the frame / control streams when they differ by
    /// at most `tolerance`. Returns whether the streams are aligned afterwards.
    pub fn synchronize(&mut self, tolerance: usize) -> bool {
        let (f, c) = (self.frames.len(), self.controls.len());
        if f == c {
            return true;
        }
        if f.abs_diff(c) > tolerance {
            return false;
        }
        let keep = f.min(c);
        self.frames.truncate(keep);
        self.controls.truncate(keep);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    pub session_id: String,
    pub start_index: usize,
    pub fps: u32,
    pub frames: Vec<String>,
    pub controls: Vec<ControlSample>,
    pub metadata: SessionMetadata,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flags(&self) -> RolloutFlags {
        self.metadata.rollout_flags.clone().unwrap_or_default()
    }
}

pub fn clip_id(session_id: &str, start_index: usize) -> String {
    format!("{session_id}@{start_index:06}")
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Allowed character ids; `None` accepts any id.
    pub character_vocabulary: Option<Vec<String>>,
    pub sync_tolerance: usize,
    /// Require every referenced frame file to exist.
    pub check_frames: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            character_vocabulary: None,
            sync_tolerance: DEFAULT_SYNC_TOLERANCE,
            check_frames: true,
        }
    }
}

const MANIFEST_KEYS: &[&str] = &["session_id", "fps", "frames", "controls", "metadata", "flags"];

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.find(&needle)
        .map(|pos| text[..pos].bytes().filter(|b| *b == b'\n').count() + 1)
}

fn manifest_field<T: DeserializeOwned>(
    path: &Path,
    text: &str,
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<T, IngestError> {
    let malformed = |message: String| IngestError::MalformedManifest {
        path: path.to_path_buf(),
        line: line_of_key(text, key),
        field: Some(key.to_string()),
        message,
    };
    let value = obj
        .get(key)
        .ok_or_else(|| malformed("missing required field".to_string()))?;
    serde_json::from_value(value.clone()).map_err(|e| malformed(e.to_string()))
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a control log, rejecting duplicate timesteps and out-of-range sticks.
pub fn load_control_log(path: &Path) -> Result<Vec<ControlSample>, IngestError> {
    let text = read_text(path)?;
    let mut seen = HashSet::new();
    let mut controls = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |field: Option<&str>, message: String| IngestError::MalformedManifest {
            path: path.to_path_buf(),
            line: Some(idx + 1),
            field: field.map(str::to_string),
            message,
        };
        let sample: ControlSample =
            serde_json::from_str(line).map_err(|e| malformed(None, e.to_string()))?;
        if !seen.insert(sample.timestep) {
            return Err(malformed(
                Some("timestep"),
                format!("duplicate timestep {}", sample.timestep),
            ));
        }
        for (name, v) in [("stick_x", sample.stick_x), ("stick_y", sample.stick_y)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(malformed(Some(name), format!("{v} outside [-1, 1]")));
            }
        }
        controls.push(sample);
    }
    controls.sort_by_key(|c| c.timestep);
    Ok(controls)
}

pub fn load_session(manifest_path: &Path, cfg: &IngestConfig) -> Result<Session, IngestError> {
    let text = read_text(manifest_path)?;
    let root: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| IngestError::MalformedManifest {
            path: manifest_path.to_path_buf(),
            line: Some(e.line()),
            field: None,
            message: e.to_string(),
        })?;
    let obj = root.as_object().ok_or_else(|| IngestError::MalformedManifest {
        path: manifest_path.to_path_buf(),
        line: Some(1),
        field: None,
        message: "manifest must be a single object".to_string(),
    })?;
    for key in obj.keys() {
        if !MANIFEST_KEYS.contains(&key.as_str()) {
            log::warn!("{}: ignoring unknown field `{key}`", manifest_path.display());
        }
    }

    let session_id: String = manifest_field(manifest_path, &text, obj, "session_id")?;
    let fps: u32 = manifest_field(manifest_path, &text, obj, "fps")?;
    if fps == 0 {
        return Err(IngestError::MalformedManifest {
            path: manifest_path.to_path_buf(),
            line: line_of_key(&text, "fps"),
            field: Some("fps".into()),
            message: "fps must be positive".into(),
        });
    }
    let frames: Vec<PathBuf> = manifest_field(manifest_path, &text, obj, "frames")?;
    let controls_rel: PathBuf = manifest_field(manifest_path, &text, obj, "controls")?;
    let mut metadata: SessionMetadata = manifest_field(manifest_path, &text, obj, "metadata")?;

    let base = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    if obj.contains_key("flags") {
        let flags_rel: PathBuf = manifest_field(manifest_path, &text, obj, "flags")?;
        let flags_path = base.join(flags_rel);
        let flags_text = read_text(&flags_path)?;
        let flags = serde_json::from_str(&flags_text).map_err(|e| IngestError::MalformedManifest {
            path: flags_path.clone(),
            line: Some(e.line()),
            field: None,
            message: e.to_string(),
        })?;
        metadata.rollout_flags = Some(flags);
    }

    if let Some(vocab) = &cfg.character_vocabulary {
        match &metadata.character_id {
            Some(id) if vocab.iter().any(|v| v == id) => {}
            other => {
                return Err(IngestError::VocabularyViolation {
                    character_id: other.clone(),
                })
            }
        }
    }

    if cfg.check_frames {
        for frame in &frames {
            let full = base.join(frame);
            if !full.exists() {
                return Err(IngestError::MissingFile(full));
            }
        }
    }

    let controls = load_control_log(&base.join(controls_rel))?;
    let mut session = Session {
        session_id,
        frame_root: base,
        frames,
        controls,
        metadata,
        fps,
    };
    session.synchronize(cfg.sync_tolerance);
    Ok(session)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum InvalidReason {
    NoFrames,
    NonMonotone { index: usize },
    CountMismatch { frames: usize, controls: usize },
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub reasons: Vec<InvalidReason>,
}

pub fn validate_session(s: &Session, sync_tolerance: usize) -> ValidationReport {
    let mut reasons = Vec::new();
    if s.frames.is_empty() {
        reasons.push(InvalidReason::NoFrames);
    }
    if let Some(i) = s
        .controls
        .windows(2)
        .position(|w| w[1].timestep <= w[0].timestep)
    {
        reasons.push(InvalidReason::NonMonotone { index: i + 1 });
    }
    if s.frames.len().abs_diff(s.controls.len()) > sync_tolerance {
        reasons.push(InvalidReason::CountMismatch {
            frames: s.frames.len(),
            controls: s.controls.len(),
        });
    }
    if s.controls.iter().all(ControlSample::is_idle) {
        reasons.push(InvalidReason::Inactive);
    }
    ValidationReport {
        valid: reasons.is_empty(),
        reasons,
    }
}

/// Splits a session into non-overlapping clips of `length` frames. Trailing
/// frames that do not fill a clip are dropped.
pub fn segment(s: &Session, length: usize) -> Result<Vec<Clip>, IngestError> {
    let frame_count = s.frame_count();
    if length == 0 || length > frame_count {
        return Err(IngestError::InvalidLength {
            length,
            frame_count,
        });
    }
    let clips = (0..frame_count / length)
        .map(|k| {
            let start = k * length;
            Clip {
                clip_id: clip_id(&s.session_id, start),
                session_id: s.session_id.clone(),
                start_index: start,
                fps: s.fps,
                frames: s.frames[start..start + length]
                    .iter()
                    .map(|f| s.frame_root.join(f).to_string_lossy().into_owned())
                    .collect(),
                controls: s.controls[start..start + length].to_vec(),
                metadata: s.metadata.clone(),
            }
        })
        .collect();
    Ok(clips)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub no_visible_agents: usize,
    pub stationary_agents: usize,
    pub early_uninformative: usize,
    pub obstructed: usize,
    pub too_many_characters: usize,
    /// Clips dropped for any reason; a clip may count under several reasons.
    pub total: usize,
}

impl DropCounts {
    pub fn merge(&mut self, other: &DropCounts) {
        self.no_visible_agents += other.no_visible_agents;
        self.stationary_agents += other.stationary_agents;
        self.early_uninformative += other.early_uninformative;
        self.obstructed += other.obstructed;
        self.too_many_characters += other.too_many_characters;
        self.total += other.total;
    }
}

pub fn filter_rollouts(clips: Vec<Clip>) -> (Vec<Clip>, DropCounts) {
    let mut counts = DropCounts::default();
    let kept = clips
        .into_iter()
        .filter(|clip| {
            let f = clip.flags();
            let hits = [
                (f.no_visible_agents, &mut counts.no_visible_agents),
                (f.stationary_agents, &mut counts.stationary_agents),
                (f.early_uninformative, &mut counts.early_uninformative),
                (f.obstructed, &mut counts.obstructed),
                (
                    f.character_count > MAX_CHARACTERS,
                    &mut counts.too_many_characters,
                ),
            ];
            let mut dropped = false;
            for (hit, counter) in hits {
                if hit {
                    *counter += 1;
                    dropped = true;
                }
            }
            if dropped {
                counts.total += 1;
            }
            !dropped
        })
        .collect();
    (kept, counts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedSession {
    pub session_id: String,
    pub reasons: Vec<InvalidReason>,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub clips: Vec<Clip>,
    pub rejected: Vec<RejectedSession>,
    pub dropped: DropCounts,
}

/// Loads, validates, segments and filters every manifest. Sessions are
/// processed in parallel; output is ordered by `(session_id, start_index)`.
pub fn ingest_manifests(
    manifests: &[PathBuf],
    clip_length: usize,
    cfg: &IngestConfig,
) -> Result<IngestOutcome, IngestError> {
    let per_session: Vec<Result<(Vec<Clip>, Option<RejectedSession>), IngestError>> = manifests
        .par_iter()
        .map(|path| {
            let session = load_session(path, cfg)?;
            let report = validate_session(&session, cfg.sync_tolerance);
            if !report.valid {
                return Ok((
                    Vec::new(),
                    Some(RejectedSession {
                        session_id: session.session_id,
                        reasons: report.reasons,
                    }),
                ));
            }
            match segment(&session, clip_length) {
                Ok(clips) => Ok((clips, None)),
                Err(IngestError::InvalidLength { .. }) => Ok((
                    Vec::new(),
                    Some(RejectedSession {
                        session_id: session.session_id,
                        reasons: vec![InvalidReason::NoFrames],
                    }),
                )),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut clips = Vec::new();
    let mut rejected = Vec::new();
    for result in per_session {
        let (c, r) = result?;
        clips.extend(c);
        rejected.extend(r);
    }
    clips.sort_by(|a, b| {
        (a.session_id.as_str(), a.start_index).cmp(&(b.session_id.as_str(), b.start_index))
    });
    rejected.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let (clips, dropped) = filter_rollouts(clips);
    Ok(IngestOutcome {
        clips,
        rejected,
        dropped,
    })
}

/// Lists `*.json` manifests directly under `dir` or one level below, sorted.
/// Files that parse but have no `session_id` (flags sidecars) are skipped.
pub fn discover_manifests(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path).map_err(io)? {
                let inner = inner.map_err(io)?.path();
                if inner.extension().is_some_and(|e| e == "json") {
                    found.push(inner);
                }
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            found.push(path);
        }
    }
    found.retain(|p| looks_like_manifest(p));
    found.sort();
    Ok(found)
}

fn looks_like_manifest(path: &Path) -> bool {
    match std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
    {
        Some(v) => v.get("session_id").is_some(),
        None => true,
    }
}
