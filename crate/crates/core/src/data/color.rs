//! Colour harmonization by statistics matching in the lαβ space.
//!
//! RGB goes to LMS cone space, then through `log10` and the lαβ rotation,
//! where channels are roughly decorrelated. Matching per-channel mean and
//! standard deviation there and converting back shifts an image's overall
//! stain appearance toward a target.

use serde::{Deserialize, Serialize};

use super::{Domain, Sample};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// Offset inside the log so black pixels stay finite.
const LOG_OFFSET: f64 = 1e-6;

const DEGENERATE_STD: f64 = 1e-8;

fn lab_matrix() -> [[f64; 3]; 3] {
    let (a, b, c) = (1.0 / 3f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 2f64.sqrt());
    [[a, a, a], [b, b, -2.0 * b], [c, -c, 0.0]]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    std::array::from_fn(|i| std::array::from_fn(|j| cof(j, i) / det))
}

fn check_rgb(image: &Tensor) -> Result<usize> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return invalid(format!("colour transform needs a [3, H, W] image, got {s:?}"));
    }
    Ok(s[1] * s[2])
}

fn map_pixels(image: &Tensor, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Tensor> {
    let n = check_rgb(image)?;
    let v = image.values();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let p = f([v[i], v[n + i], v[2 * n + i]]);
        for c in 0..3 {
            out[c * n + i] = p[c];
        }
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// RGB in `[0, 1]` to lαβ.
pub fn to_lab(image: &Tensor) -> Result<Tensor> {
    let lab = lab_matrix();
    map_pixels(image, |rgb| {
        let lms = mat_vec(&RGB_TO_LMS, rgb);
        mat_vec(&lab, lms.map(|x| (x.max(0.0) + LOG_OFFSET).log10()))
    })
}

/// Inverse of `to_lab`; no clamping.
pub fn from_lab(lab: &Tensor) -> Result<Tensor> {
    let lab_inv = inverse(&lab_matrix());
    let lms_inv = inverse(&RGB_TO_LMS);
    map_pixels(lab, |p| {
        let lms = mat_vec(&lab_inv, p).map(|x| 10f64.powf(x) - LOG_OFFSET);
        mat_vec(&lms_inv, lms)
    })
}

/// Per-channel mean and (population) standard deviation in lαβ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ColorStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|&s| s <= 0.0) {
            return invalid(format!("colour target must be finite with positive std, got {self:?}"));
        }
        Ok(())
    }
}

fn channel_stats<'a>(planes: impl Iterator<Item = &'a [f64]> + Clone) -> ColorStats {
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let (mut sum, mut count) = (0.0, 0usize);
        for p in planes.clone() {
            let n = p.len() / 3;
            sum += p[c * n..(c + 1) * n].iter().sum::<f64>();
            count += n;
        }
        let m = sum / count as f64;
        let mut ss = 0.0;
        for p in planes.clone() {
            let n = p.len() / 3;
            ss += p[c * n..(c + 1) * n].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        std[c] = (ss / count as f64).sqrt();
    }
    ColorStats { mean, std }
}

/// Statistics of an already-converted lαβ tensor.
pub fn lab_stats(lab: &Tensor) -> Result<ColorStats> {
    if check_rgb(lab)? == 0 {
        return invalid("colour statistics of an empty image");
    }
    Ok(channel_stats(std::iter::once(lab.values())))
}

/// Per-channel affine map of lαβ values from `source` to `target` statistics.
/// Channels with a degenerate source spread only get their mean shifted.
pub fn match_lab(lab: &Tensor, source: &ColorStats, target: &ColorStats) -> Result<Tensor> {
    let n = check_rgb(lab)?;
    let mut out = lab.values().to_vec();
    for c in 0..3 {
        let gain = if source.std[c] < DEGENERATE_STD {
            1.0
        } else {
            target.std[c] / source.std[c]
        };
        for v in &mut out[c * n..(c + 1) * n] {
            *v = (*v - source.mean[c]) * gain + target.mean[c];
        }
    }
    Ok(Tensor::new(lab.shape().to_vec(), out)?)
}

/// Moves `image` to `target` statistics in lαβ and clamps back into `[0, 1]`.
pub fn color_normalize(image: &Tensor, target: &ColorStats) -> Result<Tensor> {
    target.validate()?;
    let lab = to_lab(image)?;
    let source = lab_stats(&lab)?;
    Ok(from_lab(&match_lab(&lab, &source, target)?)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Target statistics pooled over every pixel of `samples`, which must cover
/// both acquisition domains.
pub fn mosaic_target(samples: &[Sample]) -> Result<ColorStats> {
    for d in Domain::ALL {
        if !samples.iter().any(|s| s.domain == d) {
            return invalid(format!("mosaic target needs at least one {d} sample"));
        }
    }
    let labs = samples.iter().map(|s| to_lab(&s.image)).collect::<Result<Vec<_>>>()?;
    let stats = channel_stats(labs.iter().map(|t| t.values()));
    stats.validate()?;
    Ok(stats)
}
