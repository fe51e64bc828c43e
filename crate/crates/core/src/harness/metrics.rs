//! Per-epoch training log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Organ;
use crate::error::Result;

/// One epoch of a run. Wall time and per-organ dice stay in memory; the CSV
/// holds only values that are reproducible bit-for-bit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub regime: String,
    pub aux_stage: Option<usize>,
    pub train_total: f64,
    pub train_main: f64,
    pub train_aux: Option<f64>,
    pub val_dice_mean_per_image: f64,
    pub val_dice_mean_per_organ: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub grad_norm_stage1: f64,
    pub grad_norm_stage2: f64,
    pub grad_norm_stage3: f64,
    pub grad_norm_stage4: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub val_dice_per_organ: BTreeMap<Organ, f64>,
}

impl EpochRecord {
    pub fn grad_norms(&self) -> [f64; 4] {
        [
            self.grad_norm_stage1,
            self.grad_norm_stage2,
            self.grad_norm_stage3,
            self.grad_norm_stage4,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct TimingRow {
    epoch: usize,
    wall_seconds: f64,
}

impl MetricsLog {
    pub fn best_val_dice(&self) -> Option<&EpochRecord> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_dice_mean_per_image >= r.val_dice_mean_per_image => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(TimingRow {
                epoch: r.epoch,
                wall_seconds: r.wall_seconds,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}
