//! Experiment configuration: one TOML file per experiment, with CLI
//! overrides applied on top.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotbench_core::baselines::{AutoencoderConfig, ContrastiveConfig};
use slotbench_core::localize::LocalizerConfig;
use slotbench_core::policy::{PerceptionVariant, PolicyConfig};
use slotbench_core::scene::SimConfig;
use slotbench_core::slot::SlotConfig;
use slotbench_core::train::TrainConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainRepr,
    TrainLocalizer,
    EvalPck,
    TrainPolicy,
    EvalPolicy,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainRepr,
        Stage::TrainLocalizer,
        Stage::EvalPck,
        Stage::TrainPolicy,
        Stage::EvalPolicy,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainRepr => "train-repr",
            Stage::TrainLocalizer => "train-localizer",
            Stage::EvalPck => "eval-pck",
            Stage::TrainPolicy => "train-policy",
            Stage::EvalPolicy => "eval-policy",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| HarnessError::Config(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Slot,
    Autoencoder,
    Moco,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Slot => "slot",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Moco => "moco",
        }
    }
}

/// Architecture scale. `micro` is an 8×8 model for smoke runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_blocks: usize,
    /// Successful expert episodes to store.
    pub episodes: usize,
    pub image_size: usize,
    pub max_steps: usize,
    /// Seed stream of the training episodes.
    pub stream: u64,
    pub sim: SimConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_blocks: 4, episodes: 1000, image_size: 64, max_steps: 200, stream: 0, sim: SimConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    pub model_kind: ModelKind,
    pub preset: Preset,
    pub num_slots: usize,
    /// Independent of the experiment seed so downstream seeds share one
    /// representation.
    pub seed: u64,
    /// Upper bound on training frames, spread evenly over the episodes.
    pub max_frames: usize,
    /// Replaces the preset slot architecture when given.
    pub slot: Option<SlotConfig>,
    pub autoencoder: Option<AutoencoderConfig>,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Slot,
            preset: Preset::Desk,
            num_slots: 8,
            seed: 0,
            max_frames: 4000,
            slot: None,
            autoencoder: None,
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl ReprConfig {
    pub fn slot_config(&self) -> SlotConfig {
        let mut c = self.slot.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => SlotConfig::desk(self.num_slots),
            Preset::Micro => SlotConfig::micro(self.num_slots, 8, 2),
        });
        c.num_slots = self.num_slots;
        c
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        self.autoencoder.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => AutoencoderConfig::desk(),
            Preset::Micro => AutoencoderConfig::micro(),
        })
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        let mut c = self.contrastive.clone();
        if self.preset == Preset::Micro {
            let micro = SlotConfig::micro(1, 8, 2);
            c.height = micro.height;
            c.width = micro.width;
            c.encoder = micro.encoder;
        }
        c.seed = self.seed;
        c
    }

    /// Input resolution of the configured model.
    pub fn resolution(&self) -> (usize, usize) {
        match self.model_kind {
            ModelKind::Slot => {
                let c = self.slot_config();
                (c.height, c.width)
            }
            ModelKind::Autoencoder => {
                let c = self.autoencoder_config();
                (c.height, c.width)
            }
            ModelKind::Moco => {
                let c = self.contrastive_config();
                (c.height, c.width)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerSection {
    pub max_frames: usize,
    /// Held-out expert episodes the evaluation frames are drawn from.
    pub eval_episodes: usize,
    pub eval_frames: usize,
    /// Fraction of the table length.
    pub pck_threshold: f64,
    pub train: LocalizerConfig,
}

impl Default for LocalizerSection {
    fn default() -> Self {
        Self { max_frames: 4000, eval_episodes: 100, eval_frames: 1000, pck_threshold: 0.1, train: LocalizerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub variant: PerceptionVariant,
    pub train: PolicyConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { variant: PerceptionVariant::Rgb, train: PolicyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    /// Seed stream of held-out episodes; must differ from `data.stream`.
    pub stream: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, max_steps: 200, stream: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    /// Empty means the configured fraction only.
    pub data_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Stages run for every grid point, in order; the last one supplies the
    /// result row.
    pub stages: Vec<Stage>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![4, 8, 12, 16, 20],
            data_fractions: Vec::new(),
            seeds: Vec::new(),
            stages: vec![Stage::TrainRepr, Stage::TrainLocalizer, Stage::EvalPck],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed of localizer and policy training.
    pub seed: u64,
    /// Fraction of the stored episodes used by every trained stage.
    pub data_fraction: f64,
    pub data: DataConfig,
    pub repr: ReprConfig,
    pub localizer: LocalizerSection,
    pub policy: PolicySection,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            data_fraction: 1.0,
            data: DataConfig::default(),
            repr: ReprConfig::default(),
            localizer: LocalizerSection::default(),
            policy: PolicySection::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the file value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub data_fraction: Option<f64>,
    pub pck_threshold: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.k {
            self.repr.num_slots = k;
        }
        if let Some(f) = o.data_fraction {
            self.data_fraction = f;
        }
        if let Some(t) = o.pck_threshold {
            self.localizer.pck_threshold = t;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]");
        }
        if self.data.episodes == 0 || self.data.image_size == 0 {
            return bad("data.episodes and data.image_size must be positive");
        }
        if self.eval.stream == self.data.stream {
            return bad("eval.stream must differ from data.stream");
        }
        if !(self.localizer.pck_threshold > 0.0) {
            return bad("pck_threshold must be positive");
        }
        if self.repr.num_slots == 0 {
            return bad("repr.num_slots must be positive");
        }
        if self.sweep.data_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("sweep.data_fractions must lie in (0, 1]");
        }
        if self.sweep.stages.iter().any(|s| matches!(s, Stage::Sweep | Stage::Report | Stage::GenData)) {
            return bad("sweep.stages may only name training and evaluation stages");
        }
        Ok(())
    }

    /// Episodes available to trained stages under `data_fraction`.
    pub fn train_episodes(&self) -> usize {
        ((self.data.episodes as f64 * self.data_fraction).round() as usize).clamp(1, self.data.episodes)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("name = \"x\"\n[data]\nn_blocks = 8\n").unwrap();
        assert_eq!(c.data.n_blocks, 8);
        assert_eq!(c.data.episodes, DataConfig::default().episodes);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_toml("nmae = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml("data_fraction = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nstream = 0").is_err());
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides { seed: Some(3), k: Some(12), data_fraction: Some(0.5), pck_threshold: Some(0.2) };
        let c = ExperimentConfig::default().apply(&o).unwrap();
        assert_eq!((c.seed, c.repr.num_slots, c.data_fraction, c.localizer.pck_threshold), (3, 12, 0.5, 0.2));
        assert_eq!(c.train_episodes(), 500);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
        b.seed = 1;
        assert_ne!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
    }
}
