//! Experiment configuration: a plain-text TOML file with explicit keys for
//! every training hyperparameter, so the checked-in defaults are the full
//! protocol (lr 1e-4 halved every 30 epochs, 100 epochs, batch 4, warm-up
//! 50, gamma 1, 5 folds).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::autodiff::LrSchedule;
use crate::error::{Error, Result};
use crate::fusion::FusePolicy;
use crate::loss::SegLossConfig;
use crate::phantom::PhantomSpec;
use crate::reg::RegNetConfig;
use crate::semi::SemiTrainConfig;
use crate::trainer::FinalTrainConfig;
use crate::unet::UNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Phantom,
    Promise12,
}

/// Data source plus the in-plane working resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Root directory of a real dataset (.mhd volumes with
    /// `*_segmentation.mhd` references).
    pub path: Option<PathBuf>,
    /// In-plane resolution volumes are resampled to before training.
    pub resample_height: usize,
    pub resample_width: usize,
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Phantom,
            path: None,
            resample_height: 128,
            resample_width: 128,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Segmentation network architecture and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegSection {
    pub depth: usize,
    pub base_channels: usize,
    pub gamma: f64,
    pub dice_smooth: f64,
}

impl Default for SegSection {
    fn default() -> Self {
        let u = UNetConfig::default();
        let l = SegLossConfig::default();
        Self {
            depth: u.depth,
            base_channels: u.base_channels,
            gamma: l.gamma,
            dice_smooth: l.dice_smooth,
        }
    }
}

impl SegSection {
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 1,
            classes: 2,
        }
    }

    pub fn loss_config(&self) -> SegLossConfig {
        SegLossConfig {
            gamma: self.gamma,
            dice_smooth: self.dice_smooth,
        }
    }
}

/// Whole-experiment configuration. Per-stage seeds are derived from the
/// global seed, never set directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub folds: usize,
    /// Worker threads; 0 means all available.
    pub threads: usize,
    pub lr: LrSchedule,
    pub dataset: DatasetConfig,
    pub seg: SegSection,
    pub semi: SemiTrainConfig,
    pub reg: RegNetConfig,
    pub fusion: FusePolicy,
    #[serde(rename = "final")]
    pub final_train: FinalTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            folds: 5,
            threads: 0,
            lr: LrSchedule::default(),
            dataset: DatasetConfig::default(),
            seg: SegSection::default(),
            semi: SemiTrainConfig::default(),
            reg: RegNetConfig::default(),
            fusion: FusePolicy::default(),
            final_train: FinalTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("need at least 2 folds".into()));
        }
        self.dataset.phantom.validate()?;
        self.seg.unet_config().validate()?;
        self.seg.loss_config().validate()?;
        self.semi.validate()?;
        self.reg.validate()?;
        self.final_train.validate()?;
        if self.dataset.kind == DatasetKind::Promise12 && self.dataset.path.is_none() {
            return Err(Error::Config(
                "dataset.kind = promise12 requires dataset.path".into(),
            ));
        }
        let div = self.seg.unet_config().divisor().max(1 << (self.reg.levels - 1));
        if !self.dataset.resample_height.is_multiple_of(div)
            || !self.dataset.resample_width.is_multiple_of(div)
        {
            return Err(Error::Config(format!(
                "working resolution {}x{} must be divisible by {div}",
                self.dataset.resample_height, self.dataset.resample_width
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical fingerprint of the parsed configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        crate::params::hex_string(&h.finalize())
    }

    /// The stage configs share the experiment-wide schedule; seeds are
    /// stamped per fold by the pipeline.
    pub fn stamped_semi(&self, seed: u64) -> SemiTrainConfig {
        SemiTrainConfig {
            lr: self.lr,
            seed,
            ..self.semi.clone()
        }
    }

    pub fn stamped_reg(&self, seed: u64) -> RegNetConfig {
        RegNetConfig {
            lr: self.lr,
            seed,
            ..self.reg.clone()
        }
    }

    pub fn stamped_final(&self, seed: u64) -> FinalTrainConfig {
        FinalTrainConfig {
            lr: self.lr,
            seed,
            ..self.final_train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_declared_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lr.base, 1e-4);
        assert_eq!(cfg.lr.halve_every, 30);
        assert_eq!(cfg.seg.gamma, 1.0);
        assert_eq!(cfg.semi.warmup_epochs, 50);
        assert_eq!(cfg.semi.total_epochs, 100);
        assert_eq!(cfg.semi.batch_size, 4);
        assert_eq!(cfg.final_train.epochs, 100);
        assert_eq!(cfg.final_train.batch_size, 4);
        assert_eq!(cfg.reg.epochs, 100);
        assert_eq!(cfg.folds, 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 11\n[semi]\nwarmup_epochs = 5\ntotal_epochs = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.semi.warmup_epochs, 5);
        assert_eq!(cfg.semi.batch_size, 4);
        assert_eq!(cfg.folds, 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.semi.warmup_epochs = 200;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.kind = DatasetKind::Promise12;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.resample_height = 100; // not divisible by 8
        assert!(cfg.validate().is_err());
    }
}
