//! Run configuration, training loop, regime comparison and evaluation.
//!
//! A run is described by a TOML file with four sections; every key is
//! optional and falls back to the default shown here:
//!
//! ```toml
//! out_dir = "runs/example"      # no files are written when absent
//!
//! [data]
//! master_seed = 42              # data generation, fold split, shuffling, augmentation
//! per_organ = 16                # samples per organ style (5 styles)
//! image_size = 64               # multiple of 32
//! k_folds = 5
//! fold = 0                      # validation fold
//! color_normalize = true
//! augment = true
//! parallel_prep = false         # prepare batches on the rayon pool
//!
//! [model]
//! stage_channels = [16, 32, 64, 96]
//! stage_strides = [4, 2, 2, 2]
//! blocks_per_stage = 1
//! block_type = "attention"      # or "conv"
//! decoder_width = 16
//! init_seed = 7
//!
//! [train]
//! regime = "switched:2:1:0.5"   # "normal", "single:<stage>", "switched:<from>:<to>:<fraction>"
//! epochs = 24
//! lr = 5e-5
//! batch_train = 4
//! batch_val = 8
//! aux_lambda = 1.0
//! detach_main = false           # diagnostic: drop the main loss from the gradient
//! adam = { beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
//! plateau = { factor = 0.5, patience = 5, min_delta = 1e-4, min_lr = 1e-7 }
//!
//! [thresholds]                  # overrides keyed <organ>_<domain>
//! lung_hubmap = 0.1
//! ```

mod compare;
mod eval;
mod metrics;
mod train;

pub use compare::{compare_regimes, CompareSpec, ComparisonReport, CurveRow, SummaryRow};
pub use eval::{eval_checkpoint, eval_run, load_for_inference, predict_masks, EvalReport, EvalRow, PredictedMask};
pub use metrics::{EpochRecord, MetricsLog};
pub use train::{derive_seed, fold_samples, train_run, RunOutput, StepStats, Trainer};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ThresholdTable;
use crate::model::ModelConfig;
use crate::schedule::{AdamConfig, PlateauConfig, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub master_seed: u64,
    pub per_organ: usize,
    pub image_size: usize,
    pub k_folds: usize,
    pub fold: usize,
    pub color_normalize: bool,
    pub augment: bool,
    pub parallel_prep: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            master_seed: 42,
            per_organ: 16,
            image_size: 64,
            k_folds: 5,
            fold: 0,
            color_normalize: true,
            augment: true,
            parallel_prep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    pub aux_lambda: f64,
    pub detach_main: bool,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::switched_default(),
            epochs: 24,
            lr: 5e-5,
            batch_train: 4,
            batch_val: 8,
            aux_lambda: 1.0,
            detach_main: false,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub thresholds: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.per_organ == 0 {
            return bad("data.per_organ must be positive".into());
        }
        if d.image_size == 0 || !d.image_size.is_multiple_of(32) {
            return bad(format!("data.image_size {} must be a positive multiple of 32", d.image_size));
        }
        if d.k_folds < 2 || d.fold >= d.k_folds {
            return bad(format!("data.fold {} must be below data.k_folds {} (k >= 2)", d.fold, d.k_folds));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model
            .check_input(d.image_size, d.image_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        t.regime.validate().map_err(|e| Error::Config(e.to_string()))?;
        if t.epochs == 0 || t.batch_train == 0 || t.batch_val == 0 {
            return bad("train.epochs and batch sizes must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.aux_lambda >= 0.0 && t.aux_lambda.is_finite()) {
            return bad(format!("train.aux_lambda must be non-negative, got {}", t.aux_lambda));
        }
        self.threshold_table()?;
        Ok(())
    }

    pub fn threshold_table(&self) -> Result<ThresholdTable> {
        ThresholdTable::default()
            .with_overrides(&self.thresholds)
            .map_err(|e| Error::Config(e.to_string()))
    }
}
