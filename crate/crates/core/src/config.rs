//! Declarative run configuration (TOML).
//!
//! ```toml
//! seed = 7                    # optional, overrides every per-section seed
//!
//! [paths]
//! data = "data/train"
//! codebook = "out/codebook.txt"
//! weights = "out/model.tfmw"
//! output = "out/results"
//!
//! [codebook]
//! k = 64
//!
//! [model]
//! hidden_dim = 64
//!
//! [train]
//! iterations = 5000
//!
//! [tracker]
//! termination_gap = 60
//! [tracker.inpaint]
//! num_samples = 30
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainSchedule};
use crate::scorer::InpaintParams;
use crate::synth::SceneSpec;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Sequence directory, or a directory of sequence directories.
    pub data: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookSettings {
    /// Clusters per component; reduced when the data has fewer distinct values.
    pub k: usize,
    pub max_iters: usize,
}

impl Default for CodebookSettings {
    fn default() -> Self {
        CodebookSettings { k: 64, max_iters: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Pick the inpainting lookahead from each sequence's frame rate
    /// instead of `tracker.inpaint.lookahead`.
    pub auto_lookahead: bool,
    /// IOU needed for a GT/prediction match during evaluation.
    pub eval_iou_threshold: f64,
    pub paths: Paths,
    pub codebook: CodebookSettings,
    pub model: ModelSettings,
    pub train: TrainSchedule,
    pub tracker: TrackerConfig,
    pub synth: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            auto_lookahead: true,
            eval_iou_threshold: 0.5,
            paths: Paths::default(),
            codebook: CodebookSettings::default(),
            model: ModelSettings::default(),
            train: TrainSchedule::default(),
            tracker: TrackerConfig::default(),
            synth: SceneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A missing or unreadable file is a
    /// configuration error, not an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook.k == 0 || self.codebook.max_iters == 0 {
            return Err(Error::Config("codebook k and max_iters must be positive".into()));
        }
        ModelConfig::new(self.model.hidden_dim, self.codebook.k).validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.synth.validate()?;
        if !(self.eval_iou_threshold > 0.0 && self.eval_iou_threshold <= 1.0) {
            return Err(Error::Config("eval_iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn codebook_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed.unwrap_or(self.train.seed),
            ..self.train.clone()
        }
    }

    /// Tracker settings for a sequence recorded at `frame_rate`.
    pub fn tracker_for(&self, frame_rate: f64) -> TrackerConfig {
        let mut t = self.tracker;
        if let Some(seed) = self.seed {
            t.inpaint.seed = seed;
        }
        if self.auto_lookahead {
            t.inpaint.lookahead = InpaintParams::lookahead_for_frame_rate(frame_rate);
        }
        t
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed.unwrap_or(self.synth.seed),
            ..self.synth.clone()
        }
    }
}
