//! Side-by-side runs of several regimes on shared data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{write_run_outputs, Trainer};
use super::RunConfig;
use crate::data::{generate_dataset, Organ};
use crate::error::Result;
use crate::model::BlockType;
use crate::schedule::Regime;

/// Which (regime, block type) pairs to run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub regimes: Vec<Regime>,
    pub block_types: Vec<BlockType>,
    /// Epochs averaged for the early gradient-norm columns.
    pub early_epochs: usize,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            regimes: vec![Regime::Normal, Regime::SingleAux(2), Regime::switched_default()],
            block_types: vec![BlockType::Attention],
            early_epochs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: String,
    pub block_type: BlockType,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub final_val_dice: f64,
    pub dice_kidney: Option<f64>,
    pub dice_large_intestine: Option<f64>,
    pub dice_lung: Option<f64>,
    pub dice_prostate: Option<f64>,
    pub dice_spleen: Option<f64>,
    pub early_grad_norm_stage1: f64,
    pub early_grad_norm_stage2: f64,
    pub early_grad_norm_stage3: f64,
    pub early_grad_norm_stage4: f64,
}

/// One point of the plot-ready curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub regime: String,
    pub block_type: BlockType,
    pub epoch: usize,
    pub aux_stage: Option<usize>,
    pub val_dice: f64,
    pub grad_norm_stage1: f64,
    pub grad_norm_stage2: f64,
    pub grad_norm_stage3: f64,
    pub grad_norm_stage4: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonReport {
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurveRow>,
    /// `(regime, block type, error)` for runs that failed.
    pub failures: Vec<(String, BlockType, String)>,
}

impl ComparisonReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for r in &self.summary {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        for r in &self.curves {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_label(regime: Regime, block: BlockType) -> String {
    format!("{}_{block}", regime.to_string().replace(':', "-"))
}

fn summarize(regime: &str, block: BlockType, log: &super::MetricsLog, early: usize) -> Option<SummaryRow> {
    let best = log.best_val_dice()?;
    let last = log.rows.last()?;
    let n = early.clamp(1, log.rows.len());
    let mut norms = [0.0; 4];
    for r in &log.rows[..n] {
        for (acc, g) in norms.iter_mut().zip(r.grad_norms()) {
            *acc += g;
        }
    }
    let norms = norms.map(|v| v / n as f64);
    let organ = |o: Organ| best.val_dice_per_organ.get(&o).copied();
    Some(SummaryRow {
        regime: regime.to_string(),
        block_type: block,
        best_val_dice: best.val_dice_mean_per_image,
        best_epoch: best.epoch,
        final_val_dice: last.val_dice_mean_per_image,
        dice_kidney: organ(Organ::Kidney),
        dice_large_intestine: organ(Organ::LargeIntestine),
        dice_lung: organ(Organ::Lung),
        dice_prostate: organ(Organ::Prostate),
        dice_spleen: organ(Organ::Spleen),
        early_grad_norm_stage1: norms[0],
        early_grad_norm_stage2: norms[1],
        early_grad_norm_stage3: norms[2],
        early_grad_norm_stage4: norms[3],
    })
}

/// Trains every requested (regime, block type) on the same data and seed.
///
/// A failing run is recorded in `failures` and the rest still run. With
/// `base.out_dir` set, each run gets its own subdirectory and the summary
/// and curve CSVs are rewritten after every run.
pub fn compare_regimes(base: &RunConfig, spec: &CompareSpec) -> Result<ComparisonReport> {
    base.validate()?;
    let d = &base.data;
    let samples = generate_dataset(d.master_seed, d.per_organ, d.image_size)?;
    let mut report = ComparisonReport::default();
    for &block in &spec.block_types {
        for &regime in &spec.regimes {
            let mut cfg = base.clone();
            cfg.train.regime = regime;
            cfg.model.block_type = block;
            let label = run_label(regime, block);
            cfg.out_dir = base.out_dir.as_ref().map(|p| p.join(&label));
            let result = Trainer::from_samples(cfg.clone(), samples.clone())
                .and_then(Trainer::fit)
                .and_then(|out| {
                    if let Some(dir) = &cfg.out_dir {
                        write_run_outputs(dir, &cfg, &out)?;
                    }
                    Ok(out)
                });
            let name = regime.to_string();
            match result {
                Ok(out) => {
                    if let Some(row) = summarize(&name, block, &out.log, spec.early_epochs) {
                        report.summary.push(row);
                    }
                    for r in &out.log.rows {
                        report.curves.push(CurveRow {
                            regime: name.clone(),
                            block_type: block,
                            epoch: r.epoch,
                            aux_stage: r.aux_stage,
                            val_dice: r.val_dice_mean_per_image,
                            grad_norm_stage1: r.grad_norm_stage1,
                            grad_norm_stage2: r.grad_norm_stage2,
                            grad_norm_stage3: r.grad_norm_stage3,
                            grad_norm_stage4: r.grad_norm_stage4,
                        });
                    }
                }
                Err(e) => report.failures.push((name, block, e.to_string())),
            }
            if let Some(dir) = &base.out_dir {
                report.write(dir)?;
            }
        }
    }
    Ok(report)
}
