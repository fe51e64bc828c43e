//! The training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{EpochRecord, MetricsLog};
use super::RunConfig;
use crate::data::{augment, color_normalize, generate_dataset, mosaic_target, stratified_kfold, ColorStats, Organ, Sample};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, dice_score, LossWiring};
use crate::model::{save_checkpoint, Predictor, SegModel};
use crate::schedule::{aux_stage_for_epoch, OptState, NUM_STAGES};
use crate::tensor::{Tape, TensorError, Tensor};

/// Mixes `parts` into `master` (FNV-style), for per-purpose RNG streams.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = master ^ 0xcbf2_9ce4_8422_2325;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x0000_0100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// `(train, validation)` samples for the configured fold.
pub fn fold_samples(cfg: &RunConfig, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let split = stratified_kfold(&samples, d.k_folds, derive_seed(d.master_seed, &[STREAM_SPLIT]))?;
    let val_idx = split.val(d.fold)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if val_idx.binary_search(&i).is_ok() {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

/// Losses and per-stage gradient norms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub main: f64,
    pub aux: Option<f64>,
    pub grad_norms: [f64; NUM_STAGES],
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub model: SegModel,
    pub color_target: Option<ColorStats>,
}

/// Stateful training of one run, exposed step by step.
pub struct Trainer {
    cfg: RunConfig,
    model: SegModel,
    opt: OptState,
    train: Vec<Sample>,
    val: Vec<Sample>,
    color_target: Option<ColorStats>,
    log: MetricsLog,
}

fn to_loss_error(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, step },
        other => other,
    }
}

impl Trainer {
    /// Generates the synthetic dataset described by `cfg.data`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let samples = generate_dataset(d.master_seed, d.per_organ, d.image_size)?;
        Self::from_samples(cfg, samples)
    }

    /// Splits `samples` by fold and prepares the model and optimizer.
    pub fn from_samples(cfg: RunConfig, samples: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let (train, mut val) = fold_samples(&cfg, samples)?;
        let color_target = if d.color_normalize {
            Some(mosaic_target(&train)?)
        } else {
            None
        };
        if let Some(t) = &color_target {
            for s in &mut val {
                s.image = color_normalize(&s.image, t)?;
            }
        }
        let model = SegModel::new(cfg.model.clone())?;
        let opt = OptState::new(model.params(), cfg.train.lr, cfg.train.adam, cfg.train.plateau)?;
        Ok(Self {
            cfg,
            model,
            opt,
            train,
            val,
            color_target,
            log: MetricsLog::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn opt(&self) -> &OptState {
        &self.opt
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    /// Validation samples, already colour-normalized.
    pub fn val_samples(&self) -> &[Sample] {
        &self.val
    }

    pub fn color_target(&self) -> Option<&ColorStats> {
        self.color_target.as_ref()
    }

    /// Shuffled training indices for `epoch`, chunked into batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.data.master_seed,
            &[STREAM_SHUFFLE, epoch as u64],
        ));
        order.shuffle(&mut rng);
        order.chunks(self.cfg.train.batch_train).map(<[usize]>::to_vec).collect()
    }

    fn prepare_one(&self, epoch: usize, i: usize) -> Result<(Tensor, Tensor)> {
        let mut s = self.train[i].clone();
        if let Some(t) = &self.color_target {
            s.image = color_normalize(&s.image, t)?;
        }
        if self.cfg.data.augment {
            let seed = derive_seed(self.cfg.data.master_seed, &[STREAM_AUGMENT, epoch as u64, s.id as u64]);
            s = augment(&s, seed)?.0;
        }
        Ok((s.image, s.mask))
    }

    /// Colour-normalized, augmented `(image, mask)` pairs for one batch. The
    /// parallel mode returns exactly the sequential result.
    pub fn prepare_batch(&self, epoch: usize, batch: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
        if self.cfg.data.parallel_prep {
            batch.par_iter().map(|&i| self.prepare_one(epoch, i)).collect()
        } else {
            batch.iter().map(|&i| self.prepare_one(epoch, i)).collect()
        }
    }

    /// Forward and backward over a batch; gradients of the mean batch loss
    /// are left on the model parameters.
    pub fn compute_gradients(&mut self, batch: &[(Tensor, Tensor)], aux_stage: Option<usize>) -> Result<StepStats> {
        let t = &self.cfg.train;
        let wiring = LossWiring {
            aux_stage,
            aux_lambda: t.aux_lambda,
            detach_main: t.detach_main,
        };
        let factors = self.model.stage_factors();
        let aux_stages: Vec<usize> = aux_stage.into_iter().collect();
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let mut total = None;
        let (mut main, mut aux) = (0.0, 0.0);
        for (image, mask) in batch {
            let x = tape.leaf(image.clone());
            let out = self.model.forward_on(&mut tape, &vars, x, &aux_stages)?;
            let (l, b) = composite_loss(&mut tape, out.main, &out.aux, mask, &factors, wiring)?;
            main += b.main_loss;
            aux += b.aux_loss.unwrap_or(0.0);
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let Some(total) = total else {
            return Err(Error::Invalid("empty batch".into()));
        };
        let n = batch.len() as f64;
        let loss = tape.scale(total, 1.0 / n)?;
        let grads = tape.backward(loss)?;
        self.model.store_grads(&vars, &grads);
        Ok(StepStats {
            total: tape.value(loss).item(),
            main: main / n,
            aux: aux_stage.map(|_| aux / n),
            grad_norms: self.model.stage_grad_norms(),
        })
    }

    pub fn apply_update(&mut self) -> Result<()> {
        self.opt.adam_step(self.model.params_mut())
    }

    /// Mean dice per image and per organ, thresholding logits at 0.
    pub fn validate(&self) -> Result<(f64, f64, BTreeMap<Organ, f64>)> {
        let mut per_organ: BTreeMap<Organ, (f64, usize)> = BTreeMap::new();
        let mut sum = 0.0;
        for chunk in self.val.chunks(self.cfg.train.batch_val) {
            for s in chunk {
                let logits = self.model.predict_logits(&s.image)?;
                let pred = logits.map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                let d = dice_score(&pred, &s.mask)?;
                sum += d;
                let e = per_organ.entry(s.organ).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        if self.val.is_empty() {
            return Err(Error::Invalid("validation fold is empty".into()));
        }
        let per_organ: BTreeMap<Organ, f64> = per_organ.into_iter().map(|(o, (s, c))| (o, s / c as f64)).collect();
        let organ_mean = per_organ.values().sum::<f64>() / per_organ.len() as f64;
        Ok((sum / self.val.len() as f64, organ_mean, per_organ))
    }

    /// One full epoch: training steps, validation, plateau update, log row.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let t = self.cfg.train.clone();
        let aux_stage = aux_stage_for_epoch(t.regime, epoch, t.epochs)?;
        let lr = self.opt.lr;
        let batches = self.epoch_batches(epoch);
        let (mut total, mut main, mut aux) = (0.0, 0.0, 0.0);
        let mut norms = [0.0; NUM_STAGES];
        for (step, idx) in batches.iter().enumerate() {
            let batch = self.prepare_batch(epoch, idx)?;
            let stats = self
                .compute_gradients(&batch, aux_stage)
                .map_err(|e| to_loss_error(e, epoch, step))?;
            if !stats.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            self.apply_update()?;
            total += stats.total;
            main += stats.main;
            aux += stats.aux.unwrap_or(0.0);
            for (n, g) in norms.iter_mut().zip(stats.grad_norms) {
                *n += g;
            }
        }
        let steps = batches.len() as f64;
        let (dice_img, dice_organ, per_organ) = self.validate()?;
        self.opt.plateau_step(dice_img);
        let norms = norms.map(|n| n / steps);
        let rec = EpochRecord {
            epoch,
            regime: t.regime.to_string(),
            aux_stage,
            train_total: total / steps,
            train_main: main / steps,
            train_aux: aux_stage.map(|_| aux / steps),
            val_dice_mean_per_image: dice_img,
            val_dice_mean_per_organ: dice_organ,
            lr,
            grad_norm_stage1: norms[0],
            grad_norm_stage2: norms[1],
            grad_norm_stage3: norms[2],
            grad_norm_stage4: norms[3],
            wall_seconds: start.elapsed().as_secs_f64(),
            val_dice_per_organ: per_organ,
        };
        self.log.rows.push(rec.clone());
        Ok(rec)
    }

    /// Runs every remaining epoch.
    pub fn fit(mut self) -> Result<RunOutput> {
        for epoch in self.log.rows.len()..self.cfg.train.epochs {
            self.run_epoch(epoch)?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            log: self.log,
            model: self.model,
            color_target: self.color_target,
        }
    }
}

/// Checkpoint metadata describing how inputs must be prepared.
pub(crate) fn checkpoint_meta(cfg: &RunConfig, target: Option<&ColorStats>) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("regime".into(), cfg.train.regime.to_string());
    meta.insert("epochs".into(), cfg.train.epochs.to_string());
    meta.insert("image_size".into(), cfg.data.image_size.to_string());
    meta.insert("master_seed".into(), cfg.data.master_seed.to_string());
    meta.insert("fold".into(), cfg.data.fold.to_string());
    if let Some(t) = target {
        let vals: Vec<String> = t.mean.iter().chain(&t.std).map(|v| v.to_string()).collect();
        meta.insert("color_target".into(), vals.join(" "));
    }
    meta
}

pub(crate) fn parse_color_target(meta: &BTreeMap<String, String>) -> Result<Option<ColorStats>> {
    let Some(text) = meta.get("color_target") else {
        return Ok(None);
    };
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|v| {
            v.parse().map_err(|_| Error::Format {
                what: "checkpoint",
                detail: format!("bad colour target `{text}`"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != 6 {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("colour target needs 6 values, got {}", vals.len()),
        });
    }
    Ok(Some(ColorStats {
        mean: [vals[0], vals[1], vals[2]],
        std: [vals[3], vals[4], vals[5]],
    }))
}

/// Trains one run and, when `out_dir` is set, writes `metrics.csv`,
/// `timing.csv`, `config.toml` and `checkpoint.bin` there.
pub fn train_run(cfg: &RunConfig) -> Result<RunOutput> {
    let out = Trainer::new(cfg.clone())?.fit()?;
    if let Some(dir) = &cfg.out_dir {
        write_run_outputs(dir, cfg, &out)?;
    }
    Ok(out)
}

pub(crate) fn write_run_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.log.write_csv(&dir.join("metrics.csv"))?;
    out.log.write_timing_csv(&dir.join("timing.csv"))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    save_checkpoint(
        &dir.join("checkpoint.bin"),
        &out.model,
        checkpoint_meta(cfg, out.color_target.as_ref()),
    )
}
