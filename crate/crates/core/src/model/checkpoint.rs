//! Checkpoint file format.
//!
//! A UTF-8 header, one record per line, followed by raw parameter data:
//!
//! ```text
//! switchaux-checkpoint 1
//! model stage_channels=16,32,64,96 stage_strides=4,2,2,2 blocks_per_stage=1 block_type=attention decoder_width=16 init_seed=7
//! meta <key> <value>            (zero or more)
//! param <name> <d0>x<d1>x...    (one per parameter, in model order)
//! end
//! <little-endian f64 values of every parameter, concatenated in header order>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, Param, SegModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "switchaux-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, meta: BTreeMap<String, String>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| Param::new(p.name.clone(), Tensor::new(p.value.shape().to_vec(), p.value.values().to_vec()).expect("valid shape")))
            .collect();
        Self {
            config: model.config().clone(),
            params,
            meta,
        }
    }

    pub fn into_model(self) -> Result<(SegModel, BTreeMap<String, String>)> {
        let mut model = SegModel::new(self.config)?;
        model.load_params(self.params)?;
        Ok((model, self.meta))
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn model_line(c: &ModelConfig) -> String {
    format!(
        "model stage_channels={} stage_strides={} blocks_per_stage={} block_type={} decoder_width={} init_seed={}",
        join(&c.stage_channels),
        join(&c.stage_strides),
        c.blocks_per_stage,
        c.block_type,
        c.decoder_width,
        c.init_seed
    )
}

fn parse_four(v: &str) -> Result<[usize; 4]> {
    let xs: Vec<usize> = v
        .split(',')
        .map(|x| x.parse().map_err(|_| bad(format!("bad integer list `{v}`"))))
        .collect::<Result<_>>()?;
    xs.try_into().map_err(|_| bad(format!("expected 4 values in `{v}`")))
}

fn parse_model_line(line: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad field `{kv}`")))?;
        let int = || v.parse::<u64>().map_err(|_| bad(format!("bad value `{kv}`")));
        match k {
            "stage_channels" => c.stage_channels = parse_four(v)?,
            "stage_strides" => c.stage_strides = parse_four(v)?,
            "blocks_per_stage" => c.blocks_per_stage = int()? as usize,
            "block_type" => c.block_type = v.parse()?,
            "decoder_width" => c.decoder_width = int()? as usize,
            "init_seed" => c.init_seed = int()?,
            _ => return Err(bad(format!("unknown model field `{k}`"))),
        }
    }
    Ok(c)
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", model_line(&ckpt.config))?;
    for (k, v) in &ckpt.meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("meta entry `{k}` cannot be stored")));
        }
        writeln!(w, "meta {k} {v}")?;
    }
    for p in &ckpt.params {
        let dims = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(w, "param {} {dims}", p.name)?;
    }
    writeln!(w, "end")?;
    for p in &ckpt.params {
        for v in p.value.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing magic line"));
    }
    let model = next_line(&mut r)?;
    if !model.starts_with("model ") {
        return Err(bad("missing model line"));
    }
    let config = parse_model_line(&model)?;
    let mut meta = BTreeMap::new();
    let mut specs = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        let mut parts = l.splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("meta"), Some(k), v) => {
                meta.insert(k.to_string(), v.unwrap_or("").to_string());
            }
            (Some("param"), Some(name), Some(dims)) => {
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{dims}`"))))
                    .collect::<Result<_>>()?;
                specs.push((name.to_string(), shape));
            }
            _ => return Err(bad(format!("unrecognized header line `{l}`"))),
        }
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if data.len() != total * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 8, data.len())));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let params = specs
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let vals: Vec<f64> = values.by_ref().take(n).collect();
            Ok(Param::new(name, Tensor::new(shape, vals)?))
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint { config, params, meta })
}

pub fn save_checkpoint(path: &Path, model: &SegModel, meta: BTreeMap<String, String>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_checkpoint(f, &Checkpoint::from_model(model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(SegModel, BTreeMap<String, String>)> {
    read_checkpoint(File::open(path)?)?.into_model()
}
