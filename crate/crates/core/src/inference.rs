//! Test-time augmentation, per-organ thresholds and run-length encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, Organ};
use crate::error::{invalid, Error, Result};
use crate::model::Predictor;
use crate::tensor::{flip_h, flip_v, sigmoid, Tensor};

/// Binarization threshold per (organ, domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    entries: BTreeMap<(Organ, Domain), f64>,
}

impl Default for ThresholdTable {
    /// 0.5 for HPA and 0.4 for HuBMAP, except lung at 0.15 and 0.1.
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for organ in Organ::ALL {
            for domain in Domain::ALL {
                let t = match (organ, domain) {
                    (Organ::Lung, Domain::Hpa) => 0.15,
                    (Organ::Lung, Domain::Hubmap) => 0.1,
                    (_, Domain::Hpa) => 0.5,
                    (_, Domain::Hubmap) => 0.4,
                };
                entries.insert((organ, domain), t);
            }
        }
        Self { entries }
    }
}

impl ThresholdTable {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, organ: Organ, domain: Domain) -> Result<f64> {
        self.entries
            .get(&(organ, domain))
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no threshold for {organ}/{domain}")))
    }

    pub fn set(&mut self, organ: Organ, domain: Domain, threshold: f64) -> Result<()> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return invalid(format!("threshold {threshold} for {organ}/{domain} must lie in (0, 1)"));
        }
        self.entries.insert((organ, domain), threshold);
        Ok(())
    }

    /// Applies overrides keyed `<organ>_<domain>`, e.g. `lung_hubmap`.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        for (key, &t) in overrides {
            let Some((organ, domain)) = key.rsplit_once('_') else {
                return invalid(format!("threshold key `{key}` is not <organ>_<domain>"));
            };
            self.set(organ.parse()?, domain.parse()?, t)?;
        }
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Organ, Domain, f64)> + '_ {
        self.entries.iter().map(|(&(o, d), &t)| (o, d, t))
    }
}

fn sigmoid_map(logits: &Tensor) -> Tensor {
    logits.map(sigmoid)
}

/// Mean foreground probability over the four flips of `image`, each
/// prediction flipped back before averaging.
///
/// Terms are summed as `(id + h) + (v + hv)`, so the result commutes exactly
/// with flipping the input.
pub fn tta_predict<P: Predictor + ?Sized>(model: &P, image: &Tensor) -> Result<Tensor> {
    let h = flip_h(image)?;
    let v = flip_v(image)?;
    let hv = flip_h(&v)?;
    let p_id = sigmoid_map(&model.predict_logits(image)?);
    let p_h = flip_h(&sigmoid_map(&model.predict_logits(&h)?))?;
    let p_v = flip_v(&sigmoid_map(&model.predict_logits(&v)?))?;
    let p_hv = flip_v(&flip_h(&sigmoid_map(&model.predict_logits(&hv)?))?)?;
    for p in [&p_h, &p_v, &p_hv] {
        if p.shape() != p_id.shape() {
            return invalid("flipped predictions changed shape");
        }
    }
    let values = (0..p_id.len())
        .map(|i| {
            let a = p_id.values()[i] + p_h.values()[i];
            let b = p_v.values()[i] + p_hv.values()[i];
            (a + b) * 0.25
        })
        .collect();
    Ok(Tensor::new(p_id.shape().to_vec(), values)?)
}

/// `1` where `probs > threshold(organ, domain)`, else `0`.
pub fn threshold_mask(probs: &Tensor, organ: Organ, domain: Domain, table: &ThresholdTable) -> Result<Tensor> {
    let t = table.get(organ, domain)?;
    if let Some(p) = probs.values().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("probability {p} outside [0, 1]"));
    }
    Ok(probs.map(|p| if p > t { 1.0 } else { 0.0 }))
}

/// Pixel order used to flatten a mask before run-length encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RleOrder {
    #[default]
    RowMajor,
    ColumnMajor,
}

fn mask_hw(mask: &Tensor) -> Result<(usize, usize)> {
    match mask.shape() {
        &[1, h, w] | &[h, w] => Ok((h, w)),
        s => invalid(format!("rle: expected a [1, H, W] or [H, W] mask, got {s:?}")),
    }
}

/// Space-separated 1-indexed `start length` pairs in ascending order.
pub fn rle_encode(mask: &Tensor) -> Result<String> {
    rle_encode_with(mask, RleOrder::RowMajor)
}

pub fn rle_encode_with(mask: &Tensor, order: RleOrder) -> Result<String> {
    let (h, w) = mask_hw(mask)?;
    let v = mask.values();
    if let Some(x) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return invalid(format!("rle: mask holds non-binary value {x}"));
    }
    let at = |k: usize| match order {
        RleOrder::RowMajor => v[k],
        RleOrder::ColumnMajor => v[(k % h) * w + k / h],
    };
    let mut runs = Vec::new();
    let mut k = 0;
    while k < h * w {
        if at(k) == 1.0 {
            let start = k;
            while k < h * w && at(k) == 1.0 {
                k += 1;
            }
            runs.push(format!("{} {}", start + 1, k - start));
        } else {
            k += 1;
        }
    }
    Ok(runs.join(" "))
}

/// Inverse of `rle_encode` into a `[1, h, w]` mask.
pub fn rle_decode(text: &str, h: usize, w: usize) -> Result<Tensor> {
    rle_decode_with(text, h, w, RleOrder::RowMajor)
}

pub fn rle_decode_with(text: &str, h: usize, w: usize, order: RleOrder) -> Result<Tensor> {
    let n = h * w;
    let nums = text
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::Invalid(format!("rle: bad number `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    if nums.len() % 2 != 0 {
        return invalid("rle: odd number of values");
    }
    let mut out = vec![0.0; n];
    let mut prev_end = 0;
    for pair in nums.chunks_exact(2) {
        let (start, len) = (pair[0], pair[1]);
        if start == 0 || len == 0 {
            return invalid(format!("rle: run `{start} {len}` is not 1-indexed and non-empty"));
        }
        let begin = start - 1;
        if begin < prev_end {
            return invalid(format!("rle: run at {start} overlaps or is out of order"));
        }
        let end = begin + len;
        if end > n {
            return invalid(format!("rle: run `{start} {len}` exceeds {n} pixels"));
        }
        for k in begin..end {
            let idx = match order {
                RleOrder::RowMajor => k,
                RleOrder::ColumnMajor => (k % h) * w + k / h,
            };
            out[idx] = 1.0;
        }
        prev_end = end;
    }
    Ok(Tensor::new(vec![1, h, w], out)?)
}
