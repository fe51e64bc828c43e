//! PPM/PGM images and the CSV dataset manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Domain, Organ, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Reads the header tokens (skipping `#` comments) and the raw payload.
fn read_netpbm(path: &Path, magic: &str, what: &'static str) -> Result<(usize, usize, Vec<u8>)> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < data.len() && (data[pos].is_ascii_whitespace() || data[pos] == b'#') {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(what, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if tokens[0] != magic {
        return Err(bad(what, format!("expected magic {magic}, found {}", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(what, format!("bad header number `{s}`")));
    let (w, h, max) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if max != 255 {
        return Err(bad(what, format!("only 8-bit data is supported, maxval {max}")));
    }
    let payload = data.get(pos..).unwrap_or(&[]).to_vec();
    Ok((w, h, payload))
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(bad("ppm", format!("need 3 channels, got {c}")));
    }
    let n = h * w;
    let v = image.values();
    let bytes: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |ch| quantize(v[ch * n + i]))).collect();
    write_netpbm(path, "P6", w, h, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, bytes) = read_netpbm(path, "P6", "ppm")?;
    let n = h * w;
    if bytes.len() != 3 * n {
        return Err(bad("ppm", format!("expected {} data bytes, found {}", 3 * n, bytes.len())));
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| bytes[(i % n) * 3 + i / n] as f64 / 255.0))
}

/// Writes a binary `[1, H, W]` mask as PGM with values 0/255.
pub fn write_pgm_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (c, h, w) = mask.chw()?;
    if c != 1 {
        return Err(bad("pgm", format!("need 1 channel, got {c}")));
    }
    let bytes: Vec<u8> = mask.values().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_netpbm(path, "P5", w, h, &bytes)
}

/// Reads a PGM mask; any non-zero byte is foreground.
pub fn read_pgm_mask(path: &Path) -> Result<Tensor> {
    let (w, h, bytes) = read_netpbm(path, "P5", "pgm")?;
    if bytes.len() != h * w {
        return Err(bad("pgm", format!("expected {} data bytes, found {}", h * w, bytes.len())));
    }
    Ok(Tensor::new(vec![1, h, w], bytes.iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub organ: Organ,
    pub domain: Domain,
    pub seed: u64,
    pub image_path: String,
    pub mask_path: String,
}

/// Writes `images/`, `masks/` and `manifest.csv` under `dir`. Paths in the
/// manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut csv = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for s in samples {
        let image_path = format!("images/{:05}.ppm", s.id);
        let mask_path = format!("masks/{:05}.pgm", s.id);
        write_ppm(&dir.join(&image_path), &s.image)?;
        write_pgm_mask(&dir.join(&mask_path), &s.mask)?;
        let row = ManifestRow {
            id: s.id,
            organ: s.organ,
            domain: s.domain,
            seed: s.seed,
            image_path,
            mask_path,
        };
        csv.serialize(&row)?;
        rows.push(row);
    }
    csv.flush()?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Loads every sample listed in `dir/manifest.csv`. Images come back
/// quantized to 8 bits.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let resolve = |p: &str| -> PathBuf { dir.join(p) };
    read_manifest(&dir.join("manifest.csv"))?
        .into_iter()
        .map(|row| {
            let image = read_ppm(&resolve(&row.image_path))?;
            let mask = read_pgm_mask(&resolve(&row.mask_path))?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(bad("manifest", format!("sample {} has mismatched image and mask", row.id)));
            }
            Ok(Sample {
                id: row.id,
                image,
                mask,
                organ: row.organ,
                domain: row.domain,
                seed: row.seed,
            })
        })
        .collect()
}
