//! Seeded synthetic corpora with known ground truth, for tests and demos.
//!
//! Every clip is generated from a target action label, so the labels derived
//! by [`crate::describe`] are known in advance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::describe::AR_LABELS;
use crate::ingest::{
    clip_id, Button, Clip, ControlSample, RolloutFlags, SessionMetadata, SourceKind,
};
use crate::util::rng_for;

/// 1x1 transparent PNG used as the placeholder for every frame file.
const PLACEHOLDER_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f,
    0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0a, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x00,
    0x01, 0x00, 0x00, 0x05, 0x00, 0x01, 0x0d, 0x0a, 0x2d, 0xb4, 0x00, 0x00, 0x00, 0x00, 0x49,
    0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub sessions: usize,
    /// Clips per session; each session also gets a few trailing frames that
    /// do not fill a clip.
    pub clips_per_session: usize,
    pub clip_length: usize,
    pub environments: Vec<String>,
    /// Share of sessions marked as model rollouts (with rollout flags).
    pub rollout_fraction: f64,
    /// Share of rollout sessions carrying a filtering flag.
    pub flagged_fraction: f64,
    /// Write placeholder frame files. When false, ingest with
    /// `check_frames = false`.
    pub write_frames: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sessions: 200,
            clips_per_session: 3,
            clip_length: crate::ingest::DEFAULT_CLIP_LENGTH,
            environments: vec!["A".into(), "B".into()],
            rollout_fraction: 0.0,
            flagged_fraction: 0.0,
            write_frames: true,
            seed: 0,
        }
    }
}

/// Ground truth for one generated clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub action: String,
    pub character: String,
    /// Whether rollout filtering is expected to drop it.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub manifests: Vec<PathBuf>,
    pub truth: BTreeMap<String, ClipTruth>,
}

pub fn character_id(i: usize) -> String {
    format!("char_{:02}", i + 1)
}

/// Control samples whose derived action label is `label` under the default
/// rules. Panics on labels outside the default action vocabulary.
pub fn controls_for(label: &str, length: usize, t0: u64, rng: &mut ChaCha8Rng) -> Vec<ControlSample> {
    let mut samples: Vec<ControlSample> = (0..length)
        .map(|i| ControlSample {
            timestep: t0 + i as u64,
            stick_x: 0.0,
            stick_y: 0.0,
            buttons: BTreeSet::new(),
            elevation_delta: None,
        })
        .collect();
    let press = |samples: &mut Vec<ControlSample>, b: Button, rng: &mut ChaCha8Rng| {
        let at = rng.random_range(0..length);
        samples[at].buttons.insert(b);
        at
    };
    match label {
        "Mounting Hoverboard" => {
            press(&mut samples, Button::Mount, rng);
            if rng.random_bool(0.5) {
                press(&mut samples, Button::Jump, rng);
            }
        }
        "Jumping Up" | "Jumping Down" | "Jumping on the Level" => {
            let at = press(&mut samples, Button::Jump, rng);
            let rise = match label {
                "Jumping Up" => rng.random_range(0.8..2.0),
                "Jumping Down" => -rng.random_range(0.8..2.0),
                _ => rng.random_range(-0.3..0.3),
            };
            samples[at].elevation_delta = Some(rise);
            for s in samples.iter_mut() {
                s.stick_y = rng.random_range(-0.3..0.3);
            }
        }
        _ => {
            let (axis_x, sign) = match label {
                "Evading Forwards" => (false, 1.0),
                "Evading Backwards" => (false, -1.0),
                "Evading Left" => (true, -1.0),
                "Evading Right" => (true, 1.0),
                other => panic!("no generator for action label `{other}`"),
            };
            for s in samples.iter_mut() {
                let main = sign * rng.random_range(0.6..1.0);
                let off = rng.random_range(-0.3..0.3);
                if axis_x {
                    (s.stick_x, s.stick_y) = (main, off);
                } else {
                    (s.stick_x, s.stick_y) = (off, main);
                }
            }
            if rng.random_bool(0.3) {
                press(&mut samples, Button::Evade, rng);
            }
        }
    }
    samples
}

fn rollout_flags(flagged: bool, rng: &mut ChaCha8Rng) -> RolloutFlags {
    let mut f = RolloutFlags {
        character_count: rng.random_range(1..=crate::ingest::MAX_CHARACTERS),
        ..RolloutFlags::default()
    };
    if flagged {
        match rng.random_range(0..5) {
            0 => f.no_visible_agents = true,
            1 => f.stationary_agents = true,
            2 => f.early_uninformative = true,
            3 => f.obstructed = true,
            _ => f.character_count = crate::ingest::MAX_CHARACTERS + 1,
        }
    }
    f
}

struct SessionPlan {
    session_id: String,
    metadata: SessionMetadata,
    controls: Vec<ControlSample>,
    actions: Vec<String>,
    frames: usize,
}

fn plan_session(cfg: &SyntheticConfig, s: usize) -> SessionPlan {
    let session_id = format!("s{s:05}");
    let mut rng = rng_for(cfg.seed, &["synthetic", &session_id]);
    let character = character_id(rng.random_range(0..crate::describe::CR_VOCABULARY_SIZE));
    let environment = cfg
        .environments
        .choose(&mut rng)
        .cloned()
        .unwrap_or_else(|| "A".into());
    let rollout = rng.random::<f64>() < cfg.rollout_fraction;
    let flags = rollout.then(|| {
        let flagged = rng.random::<f64>() < cfg.flagged_fraction;
        rollout_flags(flagged, &mut rng)
    });
    let mut controls = Vec::new();
    let mut actions = Vec::new();
    for k in 0..cfg.clips_per_session {
        let label = AR_LABELS[rng.random_range(0..AR_LABELS.len())];
        let t0 = (k * cfg.clip_length) as u64;
        controls.extend(controls_for(label, cfg.clip_length, t0, &mut rng));
        actions.push(label.to_string());
    }
    let trailing = rng.random_range(0..cfg.clip_length.max(1));
    for i in 0..trailing {
        controls.push(ControlSample {
            timestep: (cfg.clips_per_session * cfg.clip_length + i) as u64,
            stick_x: 0.0,
            stick_y: 0.5,
            buttons: BTreeSet::new(),
            elevation_delta: None,
        });
    }
    SessionPlan {
        session_id,
        metadata: SessionMetadata {
            character_id: Some(character),
            environment_id: environment,
            source_kind: if rollout {
                SourceKind::ModelRollout
            } else {
                SourceKind::HumanGameplay
            },
            rollout_flags: flags,
        },
        frames: controls.len(),
        controls,
        actions,
    }
}

fn truth_for(
    plan: &SessionPlan,
    clip_length: usize,
    count: usize,
    truth: &mut BTreeMap<String, ClipTruth>,
) {
    let flagged = plan.metadata.rollout_flags.as_ref().is_some_and(|f| {
        f.no_visible_agents
            || f.stationary_agents
            || f.early_uninformative
            || f.obstructed
            || f.character_count > crate::ingest::MAX_CHARACTERS
    });
    for (k, action) in plan.actions.iter().take(count).enumerate() {
        truth.insert(
            clip_id(&plan.session_id, k * clip_length),
            ClipTruth {
                action: action.clone(),
                character: plan.metadata.character_id.clone().unwrap_or_default(),
                flagged,
            },
        );
    }
}

fn frame_name(i: usize) -> String {
    format!("frames/{i:06}.png")
}

/// Writes `root/<session>/manifest.json` plus its control log, optional flags
/// sidecar and frame files.
pub fn write_corpus(root: &Path, cfg: &SyntheticConfig) -> std::io::Result<SyntheticCorpus> {
    let mut corpus = SyntheticCorpus::default();
    std::fs::create_dir_all(root)?;
    for s in 0..cfg.sessions {
        let plan = plan_session(cfg, s);
        let dir = root.join(&plan.session_id);
        std::fs::create_dir_all(dir.join("frames"))?;
        let frames: Vec<String> = (0..plan.frames).map(frame_name).collect();
        if cfg.write_frames {
            for f in &frames {
                std::fs::write(dir.join(f), PLACEHOLDER_PNG)?;
            }
        }
        let mut log = String::new();
        for c in &plan.controls {
            log.push_str(&serde_json::to_string(c)?);
            log.push('\n');
        }
        std::fs::write(dir.join("controls.jsonl"), log)?;

        let mut metadata = plan.metadata.clone();
        let mut manifest = serde_json::json!({
            "session_id": plan.session_id,
            "fps": 10,
            "frames": frames,
            "controls": "controls.jsonl",
        });
        if let Some(flags) = metadata.rollout_flags.take() {
            std::fs::write(dir.join("flags.json"), serde_json::to_string_pretty(&flags)?)?;
            manifest["flags"] = "flags.json".into();
        }
        manifest["metadata"] = serde_json::to_value(&metadata)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        truth_for(&plan, cfg.clip_length, plan.actions.len(), &mut corpus.truth);
        corpus.manifests.push(path);
    }
    Ok(corpus)
}

/// Builds `n` clips directly in memory, without touching the filesystem.
pub fn clips(n: usize, cfg: &SyntheticConfig) -> (Vec<Clip>, BTreeMap<String, ClipTruth>) {
    let per = cfg.clips_per_session.max(1);
    let session_cfg = SyntheticConfig {
        clips_per_session: per,
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(n);
    let mut truth = BTreeMap::new();
    let mut s = 0;
    while out.len() < n {
        let plan = plan_session(&session_cfg, s);
        let take = per.min(n - out.len());
        truth_for(&plan, cfg.clip_length, take, &mut truth);
        for k in 0..take {
            let start = k * cfg.clip_length;
            out.push(Clip {
                clip_id: clip_id(&plan.session_id, start),
                session_id: plan.session_id.clone(),
                start_index: start,
                fps: 10,
                frames: (start..start + cfg.clip_length).map(frame_name).collect(),
                controls: plan.controls[start..start + cfg.clip_length].to_vec(),
                metadata: plan.metadata.clone(),
            });
        }
        s += 1;
    }
    (out, truth)
}
