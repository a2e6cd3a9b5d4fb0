//! Checkpointing: every model tensor in the named-array container plus a
//! JSON manifest entry carrying the config snapshot, epoch, seed, metric
//! summary, and the trainable-name list. Writes are byte-deterministic;
//! loading rebuilds the model from the embedded configs and overwrites each
//! tensor after shape validation. Any mismatch is reported as a checkpoint
//! error with every offending tensor listed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::adapter::AdapterConfig;
use crate::backbone::EncoderConfig;
use crate::container::NamedArrays;
use crate::model::{build_model, is_trainable, Model};
use crate::{Error, Result};

/// Format marker stored in the manifest.
pub const CHECKPOINT_FORMAT: &str = "samihs-checkpoint-v1";

const MANIFEST_ENTRY: &str = "__manifest__";

/// Everything about a checkpoint except the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub epoch: usize,
    pub seed: u64,
    pub encoder_config: EncoderConfig,
    pub adapter_config: AdapterConfig,
    /// Free-form metric summary recorded at save time.
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
    /// Names on the trainable side of the freeze boundary, in tensor order.
    pub trainable: Vec<String>,
}

fn manifest_to_array(meta: &CheckpointMeta) -> Result<Array2<u8>> {
    let bytes = serde_json::to_vec(meta)?;
    let n = bytes.len();
    Ok(Array2::from_shape_vec((1, n), bytes).expect("1xN shape always matches"))
}

/// Serialize a model (with bookkeeping) to checkpoint bytes.
pub fn checkpoint_bytes(
    model: &Model,
    epoch: usize,
    seed: u64,
    metrics: Option<serde_json::Value>,
) -> Result<Vec<u8>> {
    let mut trainable = Vec::new();
    model.for_each_tensor(|name, _| {
        if is_trainable(name) {
            trainable.push(name.to_string());
        }
    });
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        epoch,
        seed,
        encoder_config: model.encoder_config.clone(),
        adapter_config: model.bank.config.clone(),
        metrics,
        trainable,
    };
    let mut container = NamedArrays::new();
    container.insert_u8(MANIFEST_ENTRY, manifest_to_array(&meta)?)?;
    let mut insert_err = None;
    model.for_each_tensor(|name, tensor| {
        if insert_err.is_none() {
            if let Err(e) = container.insert_f64(name, tensor.clone()) {
                insert_err = Some(e);
            }
        }
    });
    if let Some(e) = insert_err {
        return Err(e);
    }
    Ok(container.to_bytes())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    epoch: usize,
    seed: u64,
    metrics: Option<serde_json::Value>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, epoch, seed, metrics)?;
    std::fs::write(path.as_ref(), bytes)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.as_ref().display())))
}

/// Rebuild a model from checkpoint bytes. The embedded configs reconstruct
/// the architecture; every tensor is then overwritten from the container.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let container = NamedArrays::from_bytes(bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint container: {e}")))?;
    let manifest = container
        .get_u8(MANIFEST_ENTRY)
        .map_err(|_| Error::Checkpoint("checkpoint has no manifest entry".to_string()))?;
    let manifest_bytes: Vec<u8> = manifest.iter().copied().collect();
    let meta: CheckpointMeta = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint manifest: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
            meta.format
        )));
    }
    let mut model = build_model(&meta.encoder_config, &meta.adapter_config, meta.seed)
        .map_err(|e| Error::Checkpoint(format!("checkpoint config does not build: {e}")))?;

    let mut offenders = Vec::new();
    let mut expected = vec![MANIFEST_ENTRY.to_string()];
    model.for_each_tensor_mut(|name, tensor| {
        expected.push(name.to_string());
        match container.get_f64(name) {
            Ok(stored) if stored.dim() == tensor.dim() => *tensor = stored.clone(),
            Ok(stored) => offenders.push(format!(
                "{name}: shape {:?} in checkpoint, model expects {:?}",
                stored.dim(),
                tensor.dim()
            )),
            Err(_) => offenders.push(format!("{name}: missing from checkpoint")),
        }
    });
    for name in container.names() {
        if !expected.iter().any(|e| e == name) {
            offenders.push(format!("{name}: unexpected entry"));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match model: {}",
            offenders.join("; ")
        )));
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display())))?;
    load_checkpoint_bytes(&bytes)
}
