//! Command-line front end: train, eval, predict, params, import.
//!
//! All diagnostic output is JSON lines on stdout; errors go to stderr as a
//! JSON line too, with exit codes 2 (usage/config), 3 (data), 4 (checkpoint).

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use samihs::checkpoint::{load_checkpoint, save_checkpoint};
use samihs::container::NamedArrays;
use samihs::data::{load_dataset, make_folds, percentile_clip_normalize, PointPrompt};
use samihs::metrics::{dice_score, hd95_with_pooling, Hd95Pooling};
use samihs::model::Model;
use samihs::train::{
    build_from_config, evaluate_model, import_pretrained, predict_mask, train, TrainConfig,
};
use samihs::{Error, Result};

#[derive(Parser)]
#[command(
    name = "samihs",
    about = "Parameter-efficient fine-tuning for point-prompted segmentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    /// 95th percentile over both directed boundary-distance sets pooled.
    Pooled,
    /// Maximum of the two directed 95th percentiles.
    Max,
}

impl From<PoolingArg> for Hd95Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => Hd95Pooling::PooledDirected,
            PoolingArg::Max => Hd95Pooling::MaxOfDirected,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters, prompt encoder, and mask decoder on one fold.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Cross-validation fold to hold out (overrides the config).
        #[arg(long)]
        fold: Option<usize>,
        /// Run seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate (overrides the config).
        #[arg(long)]
        lr: Option<f64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Drop the attention-branch adapters.
        #[arg(long)]
        no_mha_adapter: bool,
        /// Drop the MLP-branch adapters.
        #[arg(long)]
        no_mlp_adapter: bool,
        /// Train with plain BCE instead of the boundary-sensitive combo loss.
        #[arg(long)]
        no_bd_loss: bool,
    },
    /// Evaluate a checkpoint on a fold's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        /// Fold whose validation split to use (folds derive from the
        /// checkpoint's stored seed).
        #[arg(long)]
        fold: usize,
        /// Where to write the per-slice CSV report.
        #[arg(long, default_value = "runs")]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
        hd95_pooling: PoolingArg,
    },
    /// Segment one image from a single foreground point.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input slice: grayscale PNG, or a tensor container with an
        /// `image` entry (and optionally a `mask` entry for scoring).
        #[arg(long)]
        image: PathBuf,
        /// Prompt coordinates as `X,Y` (column,row), in input pixels.
        #[arg(long, value_parser = parse_point)]
        point: (usize, usize),
        /// Output directory; defaults to the image's directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Report parameter counts for a configuration without training.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Copy pretrained weights into a fresh model and save it as a checkpoint.
    Import {
        /// Model configuration the weights are imported into.
        #[arg(long)]
        config: PathBuf,
        /// Tensor container holding the source weights.
        #[arg(long)]
        source: PathBuf,
        /// JSON object mapping model tensor names to source entry names.
        #[arg(long)]
        mapping: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_point(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected X,Y but got {s:?}"))?;
    let parse = |v: &str, axis: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad {axis} coordinate {v:?}: {e}"))
    };
    Ok((parse(x, "x")?, parse(y, "y")?))
}

fn emit(value: serde_json::Value) {
    use std::io::Write;
    // A closed pipe (e.g. `samihs train | head`) ends the run quietly
    // instead of panicking mid-write.
    if writeln!(std::io::stdout().lock(), "{value}").is_err() {
        std::process::exit(0);
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        use std::io::Write;
        let _ = writeln!(
            std::io::stderr().lock(),
            "{}",
            json!({"event": "error", "message": err.to_string()})
        );
        std::process::exit(err.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            fold,
            seed,
            epochs,
            lr,
            output_dir,
            no_mha_adapter,
            no_mlp_adapter,
            no_bd_loss,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(fold) = fold {
                cfg.fold_index = fold;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if no_mha_adapter {
                cfg.enable_mha_adapter = false;
            }
            if no_mlp_adapter {
                cfg.enable_mlp_adapter = false;
            }
            if no_bd_loss {
                cfg.enable_bd_loss = false;
            }
            cfg.validate()?;
            let samples = load_dataset(cfg.dataset_path()?)?;
            emit(json!({
                "event": "start",
                "num_slices": samples.len(),
                "fold": cfg.fold_index,
                "seed": cfg.seed,
                "epochs": cfg.epochs,
            }));
            let outcome = train(&cfg, &samples, &mut emit)?;
            emit(json!({
                "event": "done",
                "epochs_run": outcome.epochs_run,
                "final_mean_loss": outcome.final_mean_loss,
                "best_val_dice": outcome.best_val_dice,
                "best_checkpoint": outcome.best_checkpoint.map(|p| p.display().to_string()),
                "final_checkpoint": outcome.final_checkpoint.display().to_string(),
            }));
            Ok(())
        }
        Command::Eval { checkpoint, dataset, fold, output_dir, hd95_pooling } => {
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let samples = load_dataset(&dataset)?;
            let folds = make_folds(samples.len(), meta.seed)?;
            let spec = folds
                .get(fold)
                .ok_or_else(|| Error::Usage(format!("fold {fold} out of range")))?;
            let eval = evaluate_model(&model, &samples, &spec.val_ids, hd95_pooling.into())?;
            std::fs::create_dir_all(&output_dir)?;
            let csv_path = output_dir.join(format!("metrics_fold{fold}.csv"));
            std::fs::write(&csv_path, &eval.csv)?;
            emit(json!({
                "event": "evaluation",
                "checkpoint": checkpoint.display().to_string(),
                "fold": fold,
                "num_slices": eval.summary.num_slices,
                "excluded": eval.summary.excluded_dice,
                "mean_dice": eval.summary.mean_dice,
                "mean_hd95": eval.summary.mean_hd95,
                "pooled_dice": eval.pooled_dice,
                "csv": csv_path.display().to_string(),
            }));
            Ok(())
        }
        Command::Predict { checkpoint, image, point, output_dir } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let (input, gt_mask) = load_input_image(&image, model.input_size())?;
            let size = model.input_size();
            let (x, y) = point;
            if x >= size || y >= size {
                return Err(Error::Usage(format!(
                    "point {x},{y} outside the {size}x{size} input"
                )));
            }
            let prompt = PointPrompt { x, y };
            let (prediction, mask) = predict_mask(&model, &input, &prompt)?;

            let out_dir = output_dir
                .or_else(|| image.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out_dir)?;
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("prediction")
                .to_string();
            let mask_path = out_dir.join(format!("{stem}_mask.png"));
            write_mask_png(&mask_path, &mask)?;
            let probs_path = out_dir.join(format!("{stem}_probs.bin"));
            let mut container = NamedArrays::new();
            container.insert_f64("probs", prediction.full_res_probs.clone())?;
            container.insert_u8("mask", mask.clone())?;
            container.write_to(&probs_path)?;

            let mut record = json!({
                "event": "prediction",
                "image": image.display().to_string(),
                "point": [x, y],
                "foreground_pixels": mask.iter().filter(|v| **v > 0).count(),
                "mask": mask_path.display().to_string(),
                "probs": probs_path.display().to_string(),
            });
            if let Some(gt) = gt_mask {
                let dice = dice_score(&mask, &gt)?;
                let hd = hd95_with_pooling(&mask, &gt, (1.0, 1.0), Hd95Pooling::default())?;
                record["dice"] = json!(dice);
                record["hd95"] = json!(hd);
            }
            emit(record);
            Ok(())
        }
        Command::Params { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let model = build_from_config(&cfg)?;
            emit(params_report(&model));
            Ok(())
        }
        Command::Import { config, source, mapping, output } => {
            let cfg = TrainConfig::from_file(&config)?;
            let mut model = build_from_config(&cfg)?;
            let source_arrays = NamedArrays::read_from(&source)
                .map_err(|e| Error::Checkpoint(format!("cannot read source weights: {e}")))?;
            let text = std::fs::read_to_string(&mapping)
                .map_err(|e| Error::Config(format!("cannot read mapping {}: {e}", mapping.display())))?;
            let map: BTreeMap<String, String> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad mapping {}: {e}", mapping.display())))?;
            let imported = import_pretrained(&mut model, &source_arrays, &map)?;
            save_checkpoint(&output, &model, 0, cfg.seed, None)?;
            emit(json!({
                "event": "import",
                "imported_tensors": imported,
                "output": output.display().to_string(),
            }));
            Ok(())
        }
    }
}

/// Parameter-count report: totals plus a per-component breakdown.
fn params_report(model: &Model) -> serde_json::Value {
    let mut by_component: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    model.for_each_tensor(|name, tensor| {
        let component = name.split('.').next().unwrap_or("other");
        let key = match component {
            "encoder" => "encoder",
            "adapter" => "adapter",
            "prompt" => "prompt",
            "decoder" => "decoder",
            _ => "other",
        };
        *by_component.entry(key).or_default() += tensor.len();
        total += tensor.len();
    });
    let trainable = model.trainable_param_count();
    json!({
        "event": "params",
        "total_params": total,
        "trainable_params": trainable,
        "frozen_params": total - trainable,
        "adapter_params": model.adapter_param_count(),
        "by_component": by_component,
        "trainable_fraction": trainable as f64 / total as f64,
    })
}

/// Load a prediction input. PNG files are treated as raw grayscale
/// intensities and put through the same percentile normalization as the
/// training pipeline; container files must hold an `image` entry and may
/// hold a `mask` entry used only for reporting metrics.
fn load_input_image(path: &Path, expected_side: usize) -> Result<(Array2<f64>, Option<samihs::Mask>)> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let (raw, gt) = if is_png {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let mut raw = Array2::zeros((h as usize, w as usize));
        for (x, y, pixel) in img.enumerate_pixels() {
            raw[[y as usize, x as usize]] = pixel.0[0] as f64;
        }
        (raw, None)
    } else {
        let container = NamedArrays::read_from(path)
            .map_err(|e| Error::Data(format!("cannot read container {}: {e}", path.display())))?;
        let raw = container
            .get_f64("image")
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .clone();
        let gt = container.get_u8("mask").ok().cloned();
        (raw, gt)
    };
    if raw.dim() != (expected_side, expected_side) {
        return Err(Error::Data(format!(
            "input is {:?} but the model takes {expected_side}x{expected_side}",
            raw.dim()
        )));
    }
    Ok((percentile_clip_normalize(&raw, None)?, gt))
}

fn write_mask_png(path: &Path, mask: &samihs::Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let pixels: Vec<u8> = mask.iter().map(|v| if *v > 0 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("pixel buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
