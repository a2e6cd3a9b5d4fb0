//! Training, evaluation, prediction, and pretrained-weight import. Training
//! runs the frozen-encoder fine-tuning policy: per batch, each sample gets
//! its own forward/backward tape, gradients are averaged, and Adam updates
//! only the trainable tensors. Every random draw derives from the run seed,
//! so identical configurations reproduce identical checkpoints byte for byte.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::adapter::AdapterConfig;
use crate::backbone::EncoderConfig;
use crate::checkpoint::save_checkpoint;
use crate::container::NamedArrays;
use crate::data::{
    augment, augment_seed, make_folds, sample_point_prompt, AugmentConfig, PointPrompt,
    PromptMode, SliceSample, NUM_FOLDS,
};
use crate::losses::{bce_loss_node, combo_loss_node, LossWeights};
use crate::metrics::{
    dice_score, hd95_with_pooling, report_csv, summarize, Hd95Pooling, MetricSummary, SliceResult,
};
use crate::model::{bind_model, build_model, full_forward_tape, is_trainable, Model};
use crate::nn::Binder;
use crate::optim::{Adam, AdamConfig};
use crate::prompt_mask::MaskPrediction;
use crate::autodiff::Tape;
use crate::util::mix_seed;
use crate::{Error, Mask, Result};

/// Probability threshold for turning predicted probabilities into a mask.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Seed-stream tags keeping the independent random streams apart.
const SHUFFLE_STREAM: u64 = b'S' as u64;
const PROMPT_STREAM: u64 = b'P' as u64;

/// Full run configuration. Every field except `encoder` (and the dataset
/// path, when a command needs one) has a default, so a minimal config file
/// is just a dataset path plus encoder geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Path to the dataset manifest. Optional so that purely structural
    /// commands (parameter reports) can run without data.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Directory for checkpoints and reports.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    /// Adapter bottleneck width; defaults to a quarter of the channel width.
    #[serde(default)]
    pub bottleneck_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub enable_mha_adapter: bool,
    #[serde(default = "default_true")]
    pub enable_mlp_adapter: bool,
    /// When false, training uses plain BCE instead of the combo loss.
    #[serde(default = "default_true")]
    pub enable_bd_loss: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub fold_index: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validate (and consider checkpointing) every this many epochs.
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub hd95_pooling: Hd95Pooling,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

fn default_epochs() -> usize {
    200
}

fn default_batch_size() -> usize {
    2
}

fn default_learning_rate() -> f64 {
    5e-4
}

fn default_val_interval() -> usize {
    1
}

impl TrainConfig {
    /// Parse a JSON config file. All file and syntax problems surface as
    /// configuration errors (usage exit code).
    pub fn from_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss_weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be positive".into()));
        }
        if self.fold_index >= NUM_FOLDS {
            return Err(Error::Config(format!(
                "fold_index {} out of range (folds: {NUM_FOLDS})",
                self.fold_index
            )));
        }
        if self.bottleneck_dim == Some(0) {
            return Err(Error::Config("bottleneck_dim must be positive".into()));
        }
        Ok(())
    }

    /// Adapter geometry implied by this config.
    pub fn adapter_config(&self) -> AdapterConfig {
        let c = self.encoder.channel_dim;
        AdapterConfig {
            channel_dim: c,
            bottleneck_dim: self.bottleneck_dim.unwrap_or((c / 4).max(1)),
            num_layers: self.encoder.num_layers,
            enable_mha_adapter: self.enable_mha_adapter,
            enable_mlp_adapter: self.enable_mlp_adapter,
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("config has no dataset path".into()))
    }
}

/// Build the model this config describes.
pub fn build_from_config(config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    build_model(&config.encoder, &config.adapter_config(), config.seed)
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
    pub best_val_dice: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Train on the configured cross-validation fold.
pub fn train(
    config: &TrainConfig,
    samples: &[SliceSample],
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TrainOutcome> {
    let folds = make_folds(samples.len(), config.seed)?;
    let fold = &folds[config.fold_index];
    train_on_split(config, samples, &fold.train_ids, &fold.val_ids, log)
}

/// Train on an explicit index split. Validation may alias the training set
/// (the overfit harness evaluates on what it memorized) or be empty.
pub fn train_on_split(
    config: &TrainConfig,
    samples: &[SliceSample],
    train_ids: &[usize],
    val_ids: &[usize],
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ids.is_empty() {
        return Err(Error::Data("no training samples in split".into()));
    }
    for &id in train_ids.iter().chain(val_ids) {
        if id >= samples.len() {
            return Err(Error::Data(format!("split index {id} out of range")));
        }
    }
    let mut model = build_from_config(config)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    std::fs::create_dir_all(&config.output_dir)?;
    let best_path = config.output_dir.join("checkpoint_best.ckpt");
    let final_path = config.output_dir.join("checkpoint_final.ckpt");

    let mut best_val_dice: Option<f64> = None;
    let mut best_saved = false;
    let mut initial_mean_loss = f64::NAN;
    let mut final_mean_loss = f64::NAN;
    let mut last_validation: Option<serde_json::Value> = None;

    for epoch in 0..config.epochs {
        let mut order = train_ids.to_vec();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let step = train_step(config, &mut model, &mut adam, samples, batch, epoch, log)?;
            loss_sum += step.loss_sum;
            loss_count += step.samples_used;
        }
        let mean_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
        if epoch == 0 {
            initial_mean_loss = mean_loss;
        }
        final_mean_loss = mean_loss;
        log(json!({
            "event": "epoch",
            "epoch": epoch,
            "mean_loss": if mean_loss.is_nan() { None } else { Some(mean_loss) },
            "samples_used": loss_count,
        }));

        let last_epoch = epoch + 1 == config.epochs;
        if !val_ids.is_empty() && ((epoch + 1) % config.val_interval == 0 || last_epoch) {
            let eval = evaluate_model(&model, samples, val_ids, config.hd95_pooling)?;
            let record = json!({
                "event": "validation",
                "epoch": epoch,
                "mean_dice": eval.summary.mean_dice,
                "mean_hd95": eval.summary.mean_hd95,
                "pooled_dice": eval.pooled_dice,
            });
            log(record.clone());
            last_validation = Some(record);
            if let Some(dice) = eval.summary.mean_dice {
                let improved = match best_val_dice {
                    None => true,
                    Some(best) => dice > best,
                };
                if improved {
                    best_val_dice = Some(dice);
                    let metrics = json!({
                        "epoch": epoch,
                        "mean_dice": eval.summary.mean_dice,
                        "mean_hd95": eval.summary.mean_hd95,
                        "pooled_dice": eval.pooled_dice,
                    });
                    save_checkpoint(&best_path, &model, epoch, config.seed, Some(metrics))?;
                    best_saved = true;
                    log(json!({
                        "event": "best_checkpoint",
                        "epoch": epoch,
                        "mean_dice": dice,
                        "path": best_path.display().to_string(),
                    }));
                }
            }
        }
    }

    let final_metrics = last_validation.map(|mut v| {
        if let Some(map) = v.as_object_mut() {
            map.remove("event");
        }
        v
    });
    save_checkpoint(&final_path, &model, config.epochs, config.seed, final_metrics)?;
    log(json!({
        "event": "training_complete",
        "epochs": config.epochs,
        "final_mean_loss": if final_mean_loss.is_nan() { None } else { Some(final_mean_loss) },
        "final_checkpoint": final_path.display().to_string(),
    }));
    Ok(TrainOutcome {
        epochs_run: config.epochs,
        initial_mean_loss,
        final_mean_loss,
        best_val_dice,
        best_checkpoint: best_saved.then_some(best_path),
        final_checkpoint: final_path,
    })
}

struct StepStats {
    loss_sum: f64,
    samples_used: usize,
}

/// One optimizer step over a batch: per-sample tapes, averaged gradients,
/// Adam on the trainable set. Samples whose mask has no foreground (or loses
/// it to augmentation) are skipped with a warning, since no point prompt can
/// be drawn for them.
fn train_step(
    config: &TrainConfig,
    model: &mut Model,
    adam: &mut Adam,
    samples: &[SliceSample],
    batch: &[usize],
    epoch: usize,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<StepStats> {
    let mut prepared: Vec<(SliceSample, PointPrompt)> = Vec::with_capacity(batch.len());
    for &idx in batch {
        let sample = &samples[idx];
        if sample.mask.iter().all(|v| *v == 0) {
            log(json!({
                "event": "warn",
                "reason": "slice has no foreground; skipped (no prompt possible)",
                "sample": idx,
                "epoch": epoch,
            }));
            continue;
        }
        let augmented = augment(sample, &config.augment, augment_seed(config.seed, epoch, idx));
        if augmented.mask.iter().all(|v| *v == 0) {
            log(json!({
                "event": "warn",
                "reason": "augmentation moved the target out of frame; skipped",
                "sample": idx,
                "epoch": epoch,
            }));
            continue;
        }
        let prompt_seed = mix_seed(config.seed, &[PROMPT_STREAM, epoch as u64, idx as u64]);
        let prompt = sample_point_prompt(&augmented.mask, PromptMode::Random, prompt_seed)?;
        prepared.push((augmented, prompt));
    }
    if prepared.is_empty() {
        return Ok(StepStats { loss_sum: 0.0, samples_used: 0 });
    }

    let mut grad_sums: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    for (sample, prompt) in &prepared {
        let mut tape = Tape::new();
        let (nodes, named) = {
            let mut binder = Binder::new(&mut tape, is_trainable);
            let nodes = bind_model(&mut binder, model);
            (nodes, binder.named)
        };
        let (_, probs) = full_forward_tape(&mut tape, model, &nodes, &sample.image, prompt)?;
        let loss = if config.enable_bd_loss {
            combo_loss_node(&mut tape, probs, &sample.mask, &config.loss_weights)
        } else {
            bce_loss_node(&mut tape, probs, &sample.mask)
        };
        loss_sum += tape.scalar(loss);
        let grads = tape.backward(loss);
        for (name, id) in &named {
            if let Some(grad) = grads.get(*id) {
                match grad_sums.get_mut(name) {
                    Some(sum) => *sum += grad,
                    None => {
                        grad_sums.insert(name.clone(), grad.clone());
                    }
                }
            }
        }
    }
    let scale = 1.0 / prepared.len() as f64;
    for grad in grad_sums.values_mut() {
        *grad *= scale;
    }
    model.for_each_tensor_mut(|name, tensor| {
        if let Some(grad) = grad_sums.get(name) {
            adam.update(name, tensor, grad);
        }
    });
    Ok(StepStats { loss_sum, samples_used: prepared.len() })
}

/// Threshold probabilities into a binary mask.
pub fn threshold_probs(probs: &Array2<f64>) -> Mask {
    probs.mapv(|p| u8::from(p > MASK_THRESHOLD))
}

/// Everything `evaluate_model` produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: Vec<SliceResult>,
    pub summary: MetricSummary,
    /// Dice over the pooled confusion counts of all predicted slices, as an
    /// alternative aggregation to the per-slice mean.
    pub pooled_dice: Option<f64>,
    pub csv: String,
}

/// Evaluate with deterministic centroid prompts and thresholded predictions.
/// Slices whose ground truth is empty cannot be prompted; they appear in the
/// CSV as excluded rows (NA metrics).
pub fn evaluate_model(
    model: &Model,
    samples: &[SliceSample],
    ids: &[usize],
    pooling: Hd95Pooling,
) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut results = Vec::with_capacity(ids.len());
    let mut pooled_intersection = 0usize;
    let mut pooled_total = 0usize;
    for &id in ids {
        let sample = samples
            .get(id)
            .ok_or_else(|| Error::Data(format!("evaluation index {id} out of range")))?;
        if sample.mask.iter().all(|v| *v == 0) {
            results.push(SliceResult { slice_index: id, dice: None, hd95: None });
            continue;
        }
        let prompt = sample_point_prompt(&sample.mask, PromptMode::Centroid, 0)?;
        let prediction = model.full_forward(&sample.image, &prompt)?;
        let pred_mask = threshold_probs(&prediction.full_res_probs);
        let dice = dice_score(&pred_mask, &sample.mask)?;
        let hd = hd95_with_pooling(&pred_mask, &sample.mask, sample.spacing, pooling)?;
        for (p, g) in pred_mask.iter().zip(sample.mask.iter()) {
            let p = usize::from(*p > 0);
            let g = usize::from(*g > 0);
            pooled_intersection += p & g;
            pooled_total += p + g;
        }
        results.push(SliceResult { slice_index: id, dice: Some(dice), hd95: hd });
    }
    let summary = summarize(&results);
    let pooled_dice =
        (pooled_total > 0).then(|| 2.0 * pooled_intersection as f64 / pooled_total as f64);
    let csv = report_csv(&results);
    Ok(Evaluation { results, summary, pooled_dice, csv })
}

/// One prediction: the raw model output plus the thresholded mask.
pub fn predict_mask(
    model: &Model,
    image: &Array2<f64>,
    point: &PointPrompt,
) -> Result<(MaskPrediction, Mask)> {
    let prediction = model.full_forward(image, point)?;
    let mask = threshold_probs(&prediction.full_res_probs);
    Ok((prediction, mask))
}

/// Copy tensors from an external container into the model through a name
/// mapping (`model tensor name -> source entry name`). Unmapped model
/// tensors keep their current values. All problems are collected before
/// failing so one pass reports every offender.
pub fn import_pretrained(
    model: &mut Model,
    source: &NamedArrays,
    mapping: &BTreeMap<String, String>,
) -> Result<usize> {
    let mut offenders = Vec::new();
    let mut model_names = BTreeSet::new();
    let mut imported = 0usize;
    model.for_each_tensor_mut(|name, tensor| {
        model_names.insert(name.to_string());
        let Some(source_name) = mapping.get(name) else {
            return;
        };
        match source.get_f64(source_name) {
            Ok(stored) if stored.dim() == tensor.dim() => {
                *tensor = stored.clone();
                imported += 1;
            }
            Ok(stored) => offenders.push(format!(
                "{name} <- {source_name}: source shape {:?}, model expects {:?}",
                stored.dim(),
                tensor.dim()
            )),
            Err(_) => {
                offenders.push(format!("{name} <- {source_name}: not found in source container"))
            }
        }
    });
    for mapped in mapping.keys() {
        if !model_names.contains(mapped) {
            offenders.push(format!("{mapped}: no such model tensor"));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Checkpoint(format!("import failed: {}", offenders.join("; "))));
    }
    Ok(imported)
}
