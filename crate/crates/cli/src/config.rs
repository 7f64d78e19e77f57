//! Run configuration file and value resolution.
//!
//! Every setting resolves as flag, then `ROLLOUT_EVAL_*` environment variable
//! (both handled by clap), then the config file, then the built-in default.

use std::path::{Path, PathBuf};

use rollout_eval::qa::QaMode;
use rollout_eval::sampler::{MixConfig, SamplingKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub clip_length: Option<usize>,
    pub mode: Option<QaMode>,
    pub mix: Option<MixConfig>,
    pub policy: Option<SamplingKind>,
    pub n_frames: Option<usize>,
    pub endpoint: Option<String>,
    pub num_samples: Option<usize>,
    pub epsilon: Option<f64>,
    pub port: Option<u16>,
    pub budget: Option<usize>,
    pub runs: Option<usize>,
    pub templates: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub phrases: Option<PathBuf>,
    pub patches_per_frame: Option<usize>,
    pub pad_to: Option<usize>,
}

impl RunConfig {
    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.templates, &mut cfg.rules, &mut cfg.phrases]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Fails with a validation error when an input path does not exist.
pub fn require(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Validation(format!("input not found: {}", path.display())))
    }
}
