use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use switchaux::data::{generate_dataset, load_dataset, write_dataset, write_pgm_mask, Sample};
use switchaux::harness::{
    compare_regimes, eval_checkpoint, fold_samples, load_for_inference, predict_masks, train_run, CompareSpec, RunConfig,
};
use switchaux::inference::rle_encode;
use switchaux::model::BlockType;
use switchaux::schedule::Regime;

#[derive(Parser)]
#[command(name = "switchaux", version, about = "Switched auxiliary loss experiments on synthetic tissue data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data, folds, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// e.g. `normal`, `single:2`, `switched:2:1:0.5`.
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `attention` or `conv`; a comma-separated list for `compare`.
    #[arg(long, value_delimiter = ',')]
    block_type: Vec<BlockType>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PPM/PGM files plus manifest.csv.
    GenData {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train one run; writes metrics.csv, timing.csv, config.toml, checkpoint.bin.
    Train {
        #[command(flatten)]
        o: Overrides,
    },
    /// Per-(organ, domain) dice of a checkpoint, with flip TTA and thresholds.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory from `gen-data`; defaults to the configured validation fold.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict masks and write predictions.csv (id, rle).
    Infer {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write each predicted mask as PGM.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Train several regimes on shared data; writes summary.csv and curves.csv.
    Compare {
        #[command(flatten)]
        o: Overrides,
        /// Regimes to run; defaults to normal, single:2 and switched:2:1:0.5.
        #[arg(long, value_delimiter = ',')]
        regimes: Vec<Regime>,
    },
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.data.master_seed = s;
    }
    if let Some(d) = &o.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(r) = o.regime {
        cfg.train.regime = r;
    }
    if let Some(f) = o.fold {
        cfg.data.fold = f;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(&b) = o.block_type.first() {
        cfg.model.block_type = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.out_dir {
        Some(d) => Ok(d.clone()),
        None => bail!("--out-dir (or out_dir in the config) is required"),
    }
}

fn eval_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    Ok(match data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?,
        None => {
            let d = &cfg.data;
            fold_samples(cfg, generate_dataset(d.master_seed, d.per_organ, d.image_size)?)?.1
        }
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { o } => {
            let cfg = load_config(&o)?;
            let dir = out_dir(&cfg)?;
            let d = &cfg.data;
            let samples = generate_dataset(d.master_seed, d.per_organ, d.image_size)?;
            let rows = write_dataset(&dir, &samples)?;
            println!("wrote {} samples to {}", rows.len(), dir.display());
        }
        Command::Train { o } => {
            let cfg = load_config(&o)?;
            let out = train_run(&cfg)?;
            for r in &out.log.rows {
                println!(
                    "epoch {:>3}  aux {:>4}  loss {:.4}  val dice {:.4}  lr {:.2e}  {:.1}s",
                    r.epoch,
                    r.aux_stage.map_or("-".to_string(), |s| s.to_string()),
                    r.train_total,
                    r.val_dice_mean_per_image,
                    r.lr,
                    r.wall_seconds
                );
            }
            if let Some(best) = out.log.best_val_dice() {
                println!("best val dice {:.4} at epoch {}", best.val_dice_mean_per_image, best.epoch);
            }
        }
        Command::Eval { o, checkpoint, data } => {
            let cfg = load_config(&o)?;
            let samples = eval_samples(&cfg, data.as_deref())?;
            let report = eval_checkpoint(&checkpoint, &samples, &cfg.threshold_table()?)?;
            println!("organ,domain,images,dice_mean");
            for r in &report.rows {
                println!("{},{},{},{:.4}", r.organ, r.domain, r.images, r.dice_mean);
            }
            println!("mean dice over {} images: {:.4}", report.per_image.len(), report.mean_dice());
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                report.write_csv(&dir.join("eval.csv"))?;
            }
        }
        Command::Infer {
            o,
            checkpoint,
            data,
            dump_masks,
        } => {
            let cfg = load_config(&o)?;
            let dir = out_dir(&cfg)?;
            let samples = eval_samples(&cfg, data.as_deref())?;
            let (model, target, size) = load_for_inference(&checkpoint)?;
            let size = size.unwrap_or(cfg.data.image_size);
            let preds = predict_masks(&model, &samples, &cfg.threshold_table()?, target.as_ref(), size)?;
            std::fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
            w.write_record(["id", "rle"])?;
            for p in &preds {
                w.write_record([p.id.to_string(), rle_encode(&p.mask)?])?;
                if dump_masks {
                    std::fs::create_dir_all(dir.join("masks"))?;
                    write_pgm_mask(&dir.join(format!("masks/{:05}.pgm", p.id)), &p.mask)?;
                }
            }
            w.flush()?;
            println!("wrote {} predictions to {}", preds.len(), dir.join("predictions.csv").display());
        }
        Command::Compare { o, regimes } => {
            let cfg = load_config(&o)?;
            let mut spec = CompareSpec::default();
            if !regimes.is_empty() {
                spec.regimes = regimes;
            }
            if !o.block_type.is_empty() {
                spec.block_types = o.block_type.clone();
            }
            let report = compare_regimes(&cfg, &spec)?;
            println!("regime,block_type,best_val_dice,best_epoch,early_grad_norm_stage1");
            for r in &report.summary {
                println!(
                    "{},{},{:.4},{},{:.4e}",
                    r.regime, r.block_type, r.best_val_dice, r.best_epoch, r.early_grad_norm_stage1
                );
            }
            for (regime, block, err) in &report.failures {
                eprintln!("run {regime}/{block} failed: {err}");
            }
            if !report.failures.is_empty() {
                bail!("{} run(s) failed", report.failures.len());
            }
        }
    }
    Ok(())
}
