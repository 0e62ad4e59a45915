//! Run configuration (TOML) and the `desk` / `paper` presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, MixUpConfig};
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ModelSpec, ATTENTION_LAYER};
use crate::train::{FocalLossConfig, StageConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub metadata_csv: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    /// Existing split assignment to reuse instead of splitting again.
    pub split_csv: Option<PathBuf>,
    /// Generate the synthetic blob dataset under `<out>/data` when no
    /// metadata CSV is given.
    pub synthetic: bool,
    pub synthetic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            metadata_csv: None,
            image_dir: None,
            split_csv: None,
            synthetic: false,
            synthetic_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitRatios {
            train: s.train,
            val: s.val,
            test: s.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub enabled: bool,
    pub fraction: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            enabled: true,
            fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiConfig {
    pub layer: String,
    pub opacity: f64,
}

impl Default for XaiConfig {
    fn default() -> Self {
        XaiConfig {
            layer: ATTENTION_LAYER.to_string(),
            opacity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Accepted for compatibility; computation is always 64-bit.
    pub mixed_precision: bool,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub save_epoch_checkpoints: bool,
    pub data: DataConfig,
    pub split: SplitRatios,
    pub balance: BalanceConfig,
    pub augment: AugmentConfig,
    pub mixup: MixUpConfig,
    pub model: ModelSpec,
    pub loss: FocalLossConfig,
    pub stages: Vec<StageConfig>,
    pub xai: XaiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            deterministic: true,
            mixed_precision: false,
            batch_size: 32,
            eval_batch_size: 64,
            image_size: [384, 384],
            save_epoch_checkpoints: true,
            data: DataConfig::default(),
            split: SplitRatios::default(),
            balance: BalanceConfig::default(),
            augment: AugmentConfig::default(),
            mixup: MixUpConfig::default(),
            model: ModelSpec::default(),
            loss: FocalLossConfig::default(),
            stages: StageConfig::defaults().to_vec(),
            xai: XaiConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

impl RunConfig {
    /// Toy backbone on the synthetic blob dataset, 5/4/3 epochs at 64x64.
    pub fn desk() -> Self {
        let mut stages = vec![
            StageConfig::new(1, 5, 3e-3, 1e-4),
            StageConfig::new(2, 4, 1e-3, 1e-4),
            StageConfig::new(3, 3, 3e-4, 1e-5),
        ];
        stages[1].early_stop_patience = Some(10);
        RunConfig {
            image_size: [64, 64],
            data: DataConfig {
                synthetic: true,
                ..DataConfig::default()
            },
            stages,
            ..RunConfig::default()
        }
    }

    /// Full-size schedule on a pretrained backbone loaded from
    /// `weights/backbone.safetensors`.
    pub fn paper() -> Self {
        RunConfig {
            model: ModelSpec {
                backbone: BackboneSpec::large_pretrained("weights/backbone.safetensors"),
                ..ModelSpec::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays the keys present in `text` onto `base`; unknown keys are
    /// rejected.
    pub fn merge_toml(base: &RunConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::merge_toml(base, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            seed: self.seed,
        }
    }

    pub fn target_size(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed: self.seed,
            augment: self.augment.clone(),
            mixup: self.mixup,
            loss: self.loss,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        self.augment.validate()?;
        self.mixup.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 2 and eval_batch_size >= 1".into()));
        }
        if self.image_size.contains(&0) {
            return Err(Error::Config("image_size must be nonzero".into()));
        }
        if !(self.balance.fraction > 0.0 && self.balance.fraction <= 1.0) {
            return Err(Error::Config("balance.fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.xai.opacity) {
            return Err(Error::Config("xai.opacity must be in [0, 1]".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one training stage is required".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages.windows(2).any(|w| w[1].stage_id <= w[0].stage_id) {
            return Err(Error::Config("stage ids must be increasing (1, 2, 3)".into()));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_values() {
        let c = RunConfig::default();
        assert_eq!((c.seed, c.batch_size), (42, 32));
        assert_eq!(c.balance.fraction, 0.6);
        assert_eq!((c.loss.gamma, c.loss.alpha, c.loss.smoothing), (2.0, 0.25, 0.1));
        let e: Vec<usize> = c.stages.iter().map(|s| s.epochs).collect();
        let lr: Vec<f64> = c.stages.iter().map(|s| s.base_lr).collect();
        assert_eq!(e, vec![25, 20, 15]);
        assert_eq!(lr, vec![1e-3, 1e-4, 1e-5]);
        assert_eq!(c.stages[1].early_stop_patience, Some(10));
        assert_eq!(c.image_size, [384, 384]);
    }

    #[test]
    fn toml_round_trip_and_merge() {
        let desk = RunConfig::desk();
        let text = desk.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), desk);
        let merged = RunConfig::merge_toml(&desk, "seed = 7\n[loss]\ngamma = 1.5\n").unwrap();
        assert_eq!(merged.seed, 7);
        assert_eq!(merged.loss.gamma, 1.5);
        assert_eq!(merged.loss.alpha, 0.25);
        assert_eq!(merged.stages, desk.stages);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("sede = 1").is_err());
        assert!(RunConfig::merge_toml(&RunConfig::desk(), "[loss]\ngama = 2.0").is_err());
        assert!(RunConfig::merge_toml(&RunConfig::desk(), "batch_size = 1").is_err());
        assert!("lab".parse::<Preset>().is_err());
    }

    #[test]
    fn single_stage_config() {
        let c = RunConfig::merge_toml(
            &RunConfig::desk(),
            "[[stages]]\nstage_id = 1\nepochs = 2\nbase_lr = 0.001\nweight_decay = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.stages.len(), 1);
        assert!(RunConfig::merge_toml(
            &RunConfig::desk(),
            "[[stages]]\nstage_id = 2\nepochs = 2\nbase_lr = 0.001\nweight_decay = 0.0\n[[stages]]\nstage_id = 1\nepochs = 2\nbase_lr = 0.001\nweight_decay = 0.0\n",
        )
        .is_err());
    }
}
