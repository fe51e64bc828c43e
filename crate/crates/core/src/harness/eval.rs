//! Checkpoint evaluation and mask prediction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::parse_color_target;
use crate::data::{color_normalize, resize_image, resize_mask, ColorStats, Domain, Organ, Sample};
use crate::error::Result;
use crate::inference::{threshold_mask, tta_predict, ThresholdTable};
use crate::losses::dice_score;
use crate::model::{load_checkpoint, Predictor, SegModel};
use crate::tensor::Tensor;

/// Binary prediction for one sample at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMask {
    pub id: usize,
    pub organ: Organ,
    pub domain: Domain,
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub organ: Organ,
    pub domain: Domain,
    pub images: usize,
    pub dice_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One row per (organ, domain) present, in sorted order.
    pub rows: Vec<EvalRow>,
    pub per_image: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn mean_dice(&self) -> f64 {
        self.per_image.iter().map(|&(_, d)| d).sum::<f64>() / self.per_image.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resize, colour-normalize, flip-TTA and threshold every sample.
pub fn predict_masks<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    thresholds: &ThresholdTable,
    color_target: Option<&ColorStats>,
    size: usize,
) -> Result<Vec<PredictedMask>> {
    samples
        .iter()
        .map(|s| {
            let mut image = if s.size() == size {
                s.image.clone()
            } else {
                resize_image(&s.image, size)?
            };
            if let Some(t) = color_target {
                image = color_normalize(&image, t)?;
            }
            let probs = tta_predict(model, &image)?;
            Ok(PredictedMask {
                id: s.id,
                organ: s.organ,
                domain: s.domain,
                mask: threshold_mask(&probs, s.organ, s.domain, thresholds)?,
            })
        })
        .collect()
}

/// Dice of thresholded TTA predictions against ground truth, grouped by
/// (organ, domain).
pub fn eval_run<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    thresholds: &ThresholdTable,
    color_target: Option<&ColorStats>,
    size: usize,
) -> Result<EvalReport> {
    let preds = predict_masks(model, samples, thresholds, color_target, size)?;
    let mut groups: BTreeMap<(Organ, Domain), (f64, usize)> = BTreeMap::new();
    let mut per_image = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let truth = if s.size() == size {
            s.mask.clone()
        } else {
            resize_mask(&s.mask, size)?
        };
        let d = dice_score(&p.mask, &truth)?;
        per_image.push((s.id, d));
        let e = groups.entry((s.organ, s.domain)).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    let rows = groups
        .into_iter()
        .map(|((organ, domain), (sum, n))| EvalRow {
            organ,
            domain,
            images: n,
            dice_mean: sum / n as f64,
        })
        .collect();
    Ok(EvalReport { rows, per_image })
}

/// A checkpoint's model with the colour target and image size recorded in
/// its metadata.
pub fn load_for_inference(path: &Path) -> Result<(SegModel, Option<ColorStats>, Option<usize>)> {
    let (model, meta) = load_checkpoint(path)?;
    let target = parse_color_target(&meta)?;
    let size = match meta.get("image_size") {
        Some(v) => Some(v.parse().map_err(|_| crate::Error::Format {
            what: "checkpoint",
            detail: format!("bad image_size `{v}`"),
        })?),
        None => None,
    };
    Ok((model, target, size))
}

/// Evaluates a checkpoint as prepared by `load_for_inference`; without a
/// recorded size the samples' own size is used.
pub fn eval_checkpoint(path: &Path, samples: &[Sample], thresholds: &ThresholdTable) -> Result<EvalReport> {
    let (model, target, size) = load_for_inference(path)?;
    let size = size.unwrap_or_else(|| samples.first().map_or(64, Sample::size));
    eval_run(&model, samples, thresholds, target.as_ref(), size)
}
