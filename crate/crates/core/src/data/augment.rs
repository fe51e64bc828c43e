//! Training-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{resize_image, Sample};
use crate::error::{invalid, Result};
use crate::tensor::{flip_h, flip_v, Tensor};

/// A geometric transform applied identically to image and mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialOp {
    FlipH,
    FlipV,
    /// Quarter turns counter-clockwise.
    Rot90(u8),
    /// Square crop `(top, left, side)` resized back to the full size.
    CropResize(usize, usize, usize),
}

/// What `augment` did, in order of application.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentRecord {
    pub spatial: Vec<SpatialOp>,
    pub noise_sigma: Option<f64>,
    pub brightness_contrast: Option<(f64, f64)>,
    pub hue_shift: Option<f64>,
}

/// Rotates a square `[C, N, N]` tensor by `k` quarter turns counter-clockwise.
pub fn rot90(t: &Tensor, k: u8) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if h != w {
        return invalid(format!("rot90 needs a square tensor, got {h}x{w}"));
    }
    let mut cur = t.clone();
    for _ in 0..k % 4 {
        let v = cur.values();
        let mut out = vec![0.0; v.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // (y, x) -> (w - 1 - x, y)
                    out[ch * h * w + (w - 1 - x) * h + y] = v[ch * h * w + y * w + x];
                }
            }
        }
        cur = Tensor::new(vec![c, w, h], out)?;
    }
    Ok(cur)
}

fn crop(t: &Tensor, top: usize, left: usize, side: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if side == 0 || top + side > h || left + side > w {
        return invalid(format!("crop ({top}, {left}, {side}) outside {h}x{w}"));
    }
    let v = t.values();
    Ok(Tensor::from_fn(&[c, side, side], |i| {
        let (ch, rem) = (i / (side * side), i % (side * side));
        v[ch * h * w + (top + rem / side) * w + left + rem % side]
    }))
}

/// Applies one spatial op; masks are re-binarized after resampling.
pub fn apply_spatial(t: &Tensor, op: SpatialOp, is_mask: bool) -> Result<Tensor> {
    let (_, h, _) = t.chw()?;
    Ok(match op {
        SpatialOp::FlipH => flip_h(t)?,
        SpatialOp::FlipV => flip_v(t)?,
        SpatialOp::Rot90(k) => rot90(t, k)?,
        SpatialOp::CropResize(top, left, side) => {
            let r = resize_image(&crop(t, top, left, side)?, h)?;
            if is_mask {
                r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            } else {
                r
            }
        }
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn shift_hue(image: &Tensor, dh: f64) -> Result<Tensor> {
    let (_, h, w) = image.chw()?;
    let n = h * w;
    let v = image.values();
    let mut out = v.to_vec();
    for i in 0..n {
        let (hh, s, val) = rgb_to_hsv(v[i], v[n + i], v[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(hh + dh, s, val);
        out[i] = r;
        out[n + i] = g;
        out[2 * n + i] = b;
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// Randomly flips, rotates, crops, perturbs and recolours an image/mask pair.
///
/// Each transform fires with probability 0.5. Spatial ops touch both tensors;
/// photometric ones touch only the `[3, N, N]` image, which is clamped to `[0, 1]`.
pub fn augment_pair(image: &Tensor, mask: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor, AugmentRecord)> {
    let (c, size, _) = image.chw()?;
    if c != 3 {
        return invalid(format!("augment needs an RGB image, got {c} channels"));
    }
    let mut rec = AugmentRecord::default();
    if rng.random_bool(0.5) {
        rec.spatial.push(SpatialOp::FlipH);
    }
    if rng.random_bool(0.5) {
        rec.spatial.push(SpatialOp::FlipV);
    }
    if rng.random_bool(0.5) {
        rec.spatial.push(SpatialOp::Rot90(rng.random_range(1..4)));
    }
    if rng.random_bool(0.5) {
        let side = ((size as f64 * rng.random_range(0.8..=1.0)).round() as usize).clamp(1, size);
        let top = rng.random_range(0..=size - side);
        let left = rng.random_range(0..=size - side);
        rec.spatial.push(SpatialOp::CropResize(top, left, side));
    }
    let (mut img, mut msk) = (image.clone(), mask.clone());
    for &op in &rec.spatial {
        img = apply_spatial(&img, op, false)?;
        msk = apply_spatial(&msk, op, true)?;
    }
    if rng.random_bool(0.5) {
        let sigma = rng.random_range(0.0..0.03);
        let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
        for v in img.values_mut() {
            *v += noise.sample(rng);
        }
        rec.noise_sigma = Some(sigma);
    }
    if rng.random_bool(0.5) {
        let b = rng.random_range(-0.15..0.15);
        let c = rng.random_range(0.85..1.15);
        let mean = img.mean();
        img = img.map(|v| (v - mean) * c + mean + b);
        rec.brightness_contrast = Some((b, c));
    }
    if rng.random_bool(0.5) {
        let dh = rng.random_range(-0.05..0.05);
        img = shift_hue(&img.map(|v| v.clamp(0.0, 1.0)), dh)?;
        rec.hue_shift = Some(dh);
    }
    Ok((img.map(|v| v.clamp(0.0, 1.0)), msk, rec))
}

/// Seeded `augment_pair` over a sample; metadata is kept.
pub fn augment(sample: &Sample, seed: u64) -> Result<(Sample, AugmentRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, mask, rec) = augment_pair(&sample.image, &sample.mask, &mut rng)?;
    Ok((
        Sample {
            image,
            mask,
            ..sample.clone()
        },
        rec,
    ))
}
