//! Synthetic tissue-like segmentation data.
//!
//! Every sample is a smooth union of elliptical blobs (the foreground
//! "functional tissue units") painted over a textured background. Five
//! organ styles vary blob count, size, elongation and contrast; two
//! acquisition domains apply different colour casts and noise levels.
//!
//! Style table, radii in pixels at 64 px image side (scaled linearly with size):
//!
//! | organ           | blobs | radius     | max elongation | contrast |
//! |-----------------|-------|------------|----------------|----------|
//! | kidney          | 3-5   | 6.0 - 9.0  | 1.3            | 1.00     |
//! | large intestine | 2-4   | 7.0 - 10.0 | 2.0            | 0.90     |
//! | lung            | 4-7   | 3.5 - 5.5  | 1.5            | 0.65     |
//! | prostate        | 2-4   | 6.0 - 10.0 | 1.6            | 0.80     |
//! | spleen          | 2-3   | 6.0 - 9.0  | 1.2            | 0.75     |

mod augment;
mod color;
mod io;
mod split;

pub use augment::{apply_spatial, augment, augment_pair, rot90, AugmentRecord, SpatialOp};
pub use color::{color_normalize, from_lab, lab_stats, match_lab, mosaic_target, to_lab, ColorStats};
pub use io::{load_dataset, read_manifest, read_pgm_mask, read_ppm, write_dataset, write_pgm_mask, write_ppm, ManifestRow};
pub use split::{stratified_kfold, FoldSplit, Labeled};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{upsample_bilinear_values, Tensor};

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Organ {
    Kidney,
    LargeIntestine,
    Lung,
    Prostate,
    Spleen,
}

impl Organ {
    pub const ALL: [Organ; 5] = [
        Organ::Kidney,
        Organ::LargeIntestine,
        Organ::Lung,
        Organ::Prostate,
        Organ::Spleen,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Organ::Kidney => "kidney",
            Organ::LargeIntestine => "large_intestine",
            Organ::Lung => "lung",
            Organ::Prostate => "prostate",
            Organ::Spleen => "spleen",
        }
    }

    fn index(&self) -> u64 {
        Organ::ALL.iter().position(|o| o == self).expect("listed") as u64
    }

    pub fn style(&self) -> OrganStyle {
        let (blobs, radius, elongation, contrast) = match self {
            Organ::Kidney => ((3, 5), (6.0, 9.0), 1.3, 1.0),
            Organ::LargeIntestine => ((2, 4), (7.0, 10.0), 2.0, 0.9),
            Organ::Lung => ((4, 7), (3.5, 5.5), 1.5, 0.65),
            Organ::Prostate => ((2, 4), (6.0, 10.0), 1.6, 0.8),
            Organ::Spleen => ((2, 3), (6.0, 9.0), 1.2, 0.75),
        };
        OrganStyle {
            blobs,
            radius,
            elongation,
            contrast,
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Organ::ALL
            .into_iter()
            .find(|o| o.as_str() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown organ `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Hpa,
    Hubmap,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Hpa, Domain::Hubmap];

    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Hpa => "hpa",
            Domain::Hubmap => "hubmap",
        }
    }

    /// Per-channel multiplicative cast and additive noise level.
    fn rendering(&self) -> ([f64; 3], f64) {
        match self {
            Domain::Hpa => ([1.0, 0.96, 1.0], 0.02),
            Domain::Hubmap => ([0.90, 0.84, 1.04], 0.04),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hpa" => Ok(Domain::Hpa),
            "hubmap" => Ok(Domain::Hubmap),
            _ => invalid(format!("unknown domain `{s}`")),
        }
    }
}

/// Blob-shape distribution of one organ style (radii at 64 px).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganStyle {
    pub blobs: (usize, usize),
    pub radius: (f64, f64),
    pub elongation: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub organ: Organ,
    pub domain: Domain,
    pub seed: u64,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

/// Geometry of one blob as drawn by the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub aspect: f64,
    pub angle: f64,
}

const BACKGROUND: [f64; 3] = [0.92, 0.72, 0.82];
const FOREGROUND: [f64; 3] = [0.52, 0.34, 0.66];
const MAX_ATTEMPTS: usize = 200;

// The domain only changes rendering, so both domains share blob layouts.
fn mix_seed(seed: u64, organ: Organ, size: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [organ.index() + 1, size as u64] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29);
    }
    h
}

/// Smooth random field: a coarse grid of uniform values upsampled bilinearly.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Tensor {
    let grid = Tensor::from_fn(&[1, cells, cells], |_| rng.random_range(-1.0..1.0));
    upsample_bilinear_values(&grid, size, size).expect("positive extents")
}

fn draw_blobs(rng: &mut ChaCha8Rng, style: &OrganStyle, scale: f64, size: usize) -> Vec<Blob> {
    let count = rng.random_range(style.blobs.0..=style.blobs.1);
    (0..count)
        .map(|_| {
            let radius = rng.random_range(style.radius.0..style.radius.1) * scale;
            let margin = radius * 0.5;
            Blob {
                cy: rng.random_range(margin..size as f64 - margin),
                cx: rng.random_range(margin..size as f64 - margin),
                radius,
                aspect: rng.random_range(1.0..style.elongation),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect()
}

/// Max over blobs of a Gaussian bump in each blob's rotated, stretched frame.
fn blob_field(blobs: &[Blob], size: usize, wobble: &Tensor) -> Vec<f64> {
    let w = wobble.values();
    let mut field = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best: f64 = 0.0;
            for b in blobs {
                let (s, c) = b.angle.sin_cos();
                let (dy, dx) = (py - b.cy, px - b.cx);
                let u = (c * dx + s * dy) / (b.radius * b.aspect.sqrt());
                let v = (-s * dx + c * dy) * b.aspect.sqrt() / b.radius;
                best = best.max((-0.5 * (u * u + v * v)).exp());
            }
            field[y * size + x] = best + 0.12 * w[y * size + x] * best.sqrt();
        }
    }
    field
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(32) {
        return invalid(format!("sample size {size} must be a positive multiple of 32"));
    }
    Ok(())
}

/// Redraws blob layouts until the foreground fraction is in range.
fn place_blobs(rng: &mut ChaCha8Rng, organ: Organ, seed: u64, scale: f64, size: usize) -> Result<(Vec<Blob>, Vec<f64>)> {
    let style = organ.style();
    let n = (size * size) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let blobs = draw_blobs(rng, &style, scale, size);
        let wobble = value_noise(rng, size, 6);
        let field = blob_field(&blobs, size, &wobble);
        let fg = field.iter().filter(|&&f| f > 0.5).count() as f64 / n;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg) {
            return Ok((blobs, field));
        }
    }
    invalid(format!("could not place blobs for {organ} at seed {seed}"))
}

/// Draws one deterministic synthetic sample.
pub fn generate_synthetic_sample(seed: u64, organ: Organ, domain: Domain, size: usize) -> Result<Sample> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, organ, size));
    let style = organ.style();
    let scale = size as f64 / 64.0;
    let n = size * size;

    let (_, field) = place_blobs(&mut rng, organ, seed, scale, size)?;
    let mask: Vec<f64> = field.iter().map(|&f| if f > 0.5 { 1.0 } else { 0.0 }).collect();

    let (cast, noise_sigma) = domain.rendering();
    let texture = value_noise(&mut rng, size, size / 4);
    let stain_var = value_noise(&mut rng, size, 4);
    let noise = Normal::new(0.0, noise_sigma).expect("positive sigma");
    let fg_color: [f64; 3] = std::array::from_fn(|c| {
        BACKGROUND[c] + style.contrast * (FOREGROUND[c] - BACKGROUND[c])
    });
    let mut image = vec![0.0; 3 * n];
    for i in 0..n {
        // soft edge around the 0.5 iso-line
        let s = ((field[i] - 0.35) / 0.3).clamp(0.0, 1.0);
        let t = texture.values()[i];
        let v = stain_var.values()[i];
        for c in 0..3 {
            let base = BACKGROUND[c] * (1.0 - s) + fg_color[c] * s;
            let textured = base * (1.0 + 0.06 * t + 0.04 * v);
            let value = textured * cast[c] + noise.sample(&mut rng);
            image[c * n + i] = value.clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        id: 0,
        image: Tensor::new(vec![3, size, size], image)?,
        mask: Tensor::new(vec![1, size, size], mask)?,
        organ,
        domain,
        seed,
    })
}

/// Radii (pixels) of the blobs behind the mask of `generate_synthetic_sample(seed, organ, _, size)`.
pub fn sample_blob_radii(seed: u64, organ: Organ, size: usize) -> Result<Vec<f64>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, organ, size));
    let (blobs, _) = place_blobs(&mut rng, organ, seed, size as f64 / 64.0, size)?;
    Ok(blobs.iter().map(|b| b.radius).collect())
}

/// Builds `per_organ` samples for every organ, alternating domains, with ids
/// in generation order and per-sample seeds derived from `master_seed`.
pub fn generate_dataset(master_seed: u64, per_organ: usize, size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(per_organ * Organ::ALL.len());
    for organ in Organ::ALL {
        for j in 0..per_organ {
            let id = out.len();
            let domain = Domain::ALL[j % 2];
            let seed = master_seed
                .wrapping_mul(1_000_003)
                .wrapping_add(id as u64);
            let mut s = generate_synthetic_sample(seed, organ, domain, size)?;
            s.id = id;
            out.push(s);
        }
    }
    Ok(out)
}

/// Bilinear resize of a `[C, H, W]` image to `out x out`.
pub fn resize_image(image: &Tensor, out: usize) -> Result<Tensor> {
    Ok(upsample_bilinear_values(image, out, out)?)
}

/// Bilinear resize followed by re-binarization at 0.5.
pub fn resize_mask(mask: &Tensor, out: usize) -> Result<Tensor> {
    Ok(resize_image(mask, out)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn organ_and_domain_names_round_trip() {
        for o in Organ::ALL {
            assert_eq!(o.as_str().parse::<Organ>().unwrap(), o);
        }
        assert_eq!("Large Intestine".parse::<Organ>().unwrap(), Organ::LargeIntestine);
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        assert!("liver".parse::<Organ>().is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_sample(5, Organ::Lung, Domain::Hubmap, 64).unwrap();
        let b = generate_synthetic_sample(5, Organ::Lung, Domain::Hubmap, 64).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_sample(6, Organ::Lung, Domain::Hubmap, 64).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn generator_rejects_bad_size() {
        assert!(generate_synthetic_sample(1, Organ::Kidney, Domain::Hpa, 48).is_err());
        assert!(generate_synthetic_sample(1, Organ::Kidney, Domain::Hpa, 0).is_err());
    }

    #[test]
    fn sample_ranges() {
        let s = generate_synthetic_sample(3, Organ::Kidney, Domain::Hpa, 64).unwrap();
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        assert_eq!(s.mask.shape(), &[1, 64, 64]);
        assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
        let fg = s.foreground_fraction();
        assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg));
    }

    #[test]
    fn dataset_layout() {
        let ds = generate_dataset(1, 3, 32).unwrap();
        assert_eq!(ds.len(), 15);
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(s.id, i);
        }
        assert_eq!(ds.iter().filter(|s| s.organ == Organ::Spleen).count(), 3);
        assert!(ds.iter().any(|s| s.domain == Domain::Hubmap));
    }

    #[test]
    fn mask_resize_stays_binary() {
        let s = generate_synthetic_sample(9, Organ::Prostate, Domain::Hpa, 64).unwrap();
        let m = resize_mask(&s.mask, 32).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
