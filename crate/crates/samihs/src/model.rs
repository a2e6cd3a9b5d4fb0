//! Full segmentation model: frozen ViT encoder with adapter bank, trainable
//! prompt embedding and mask decoder. This module owns the freeze rule (by
//! tensor name), the canonical tensor enumeration order used for
//! checkpointing and optimization, and the end-to-end forward pass.

use ndarray::Array2;

use crate::adapter::{
    bind_adapter_bank, count_trainable_params, init_adapter_bank, AdapterBank, AdapterBankNodes,
    AdapterConfig,
};
use crate::autodiff::{NodeId, Tape};
use crate::backbone::{
    bind_encoder, encode_image_tape, init_encoder_params, patchify, upsample_input, EncoderConfig,
    EncoderNodes, EncoderParams,
};
use crate::data::PointPrompt;
use crate::nn::Binder;
use crate::prompt_mask::{
    bind_decoder, bind_prompt, decode_mask_tape, encode_point_prompt_tape,
    init_decoder_params, init_prompt_params, DecoderNodes, DecoderParams, MaskPrediction,
    PromptNodes, PromptParams,
};
use crate::{Error, Result};

/// Freeze rule: the entire image encoder stays fixed; adapters, prompt
/// embedding, and decoder train.
pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("encoder.")
}

/// All model state plus the geometry it was built for.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub bank: AdapterBank,
    pub prompt: PromptParams,
    pub decoder: DecoderParams,
}

/// Deterministically initialize every component from one seed. Tensor values
/// depend only on (seed, tensor name), so models built with different adapter
/// flags share all other tensors bit for bit.
pub fn build_model(
    encoder_config: &EncoderConfig,
    adapter_config: &AdapterConfig,
    seed: u64,
) -> Result<Model> {
    encoder_config.validate()?;
    adapter_config.validate()?;
    if adapter_config.channel_dim != encoder_config.channel_dim
        || adapter_config.num_layers != encoder_config.num_layers
    {
        return Err(Error::contract("adapter config must match encoder width and depth"));
    }
    Ok(Model {
        encoder: init_encoder_params(encoder_config, seed)?,
        bank: init_adapter_bank(adapter_config, seed)?,
        prompt: init_prompt_params(encoder_config, seed)?,
        decoder: init_decoder_params(encoder_config, seed)?,
        encoder_config: encoder_config.clone(),
    })
}

impl Model {
    /// Visit every tensor in the canonical order: encoder, adapters, prompt,
    /// decoder. Checkpoints and optimizer state follow this order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        self.encoder.for_each_tensor(&mut f);
        self.bank.for_each_tensor(&mut f);
        self.prompt.for_each_tensor(&mut f);
        self.decoder.for_each_tensor(&mut f);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        self.encoder.for_each_tensor_mut(&mut f);
        self.bank.for_each_tensor_mut(&mut f);
        self.prompt.for_each_tensor_mut(&mut f);
        self.decoder.for_each_tensor_mut(&mut f);
    }

    /// Total element count over tensors on the trainable side of the freeze
    /// boundary.
    pub fn trainable_param_count(&self) -> usize {
        let mut count = 0;
        self.for_each_tensor(|name, t| {
            if is_trainable(name) {
                count += t.len();
            }
        });
        count
    }

    /// Adapter-only element count (closed form checked against enumeration).
    pub fn adapter_param_count(&self) -> usize {
        count_trainable_params(&self.bank)
    }

    /// Side length of raw input images this model accepts.
    pub fn input_size(&self) -> usize {
        self.encoder_config.input_size()
    }

    /// End-to-end prediction for one image and one foreground click. Runs the
    /// exact training op sequence, so eval results match training forwards
    /// bitwise.
    pub fn full_forward(&self, image: &Array2<f64>, point: &PointPrompt) -> Result<MaskPrediction> {
        let mut tape = Tape::new();
        let nodes = bind_model_frozen(&mut tape, self);
        let (low, full) = full_forward_tape(&mut tape, self, &nodes, image, point)?;
        Ok(MaskPrediction {
            low_res_logits: tape.value(low).clone(),
            full_res_probs: tape.value(full).clone(),
        })
    }
}

/// Node handles for every bound component.
#[derive(Debug, Clone)]
pub(crate) struct ModelNodes {
    pub encoder: EncoderNodes,
    pub bank: AdapterBankNodes,
    pub prompt: PromptNodes,
    pub decoder: DecoderNodes,
}

/// Bind all tensors with the default freeze rule; `named` on the binder maps
/// tensor names to nodes for gradient lookup.
pub(crate) fn bind_model(binder: &mut Binder, model: &Model) -> ModelNodes {
    ModelNodes {
        encoder: bind_encoder(binder, &model.encoder),
        bank: bind_adapter_bank(binder, &model.bank),
        prompt: bind_prompt(binder, &model.prompt),
        decoder: bind_decoder(binder, &model.decoder),
    }
}

/// Bind for pure evaluation (no gradients anywhere).
pub(crate) fn bind_model_frozen(tape: &mut Tape, model: &Model) -> ModelNodes {
    let mut binder = Binder::all_frozen(tape);
    bind_model(&mut binder, model)
}

/// Build the forward graph for one sample: preprocess the image outside the
/// tape (it needs no gradients), then encoder -> prompt -> decoder ->
/// upsample -> sigmoid. Returns (low-res logits, full-res probabilities).
pub(crate) fn full_forward_tape(
    tape: &mut Tape,
    model: &Model,
    nodes: &ModelNodes,
    image: &Array2<f64>,
    point: &PointPrompt,
) -> Result<(NodeId, NodeId)> {
    let config = &model.encoder_config;
    let side = config.input_size();
    if image.dim() != (side, side) {
        return Err(Error::contract("input image does not match configured size"));
    }
    let patches = patchify(&upsample_input(image)?, config.patch_size)?;
    let patches_node = tape.constant(patches);
    let embedding = encode_image_tape(tape, patches_node, &nodes.encoder, &nodes.bank, config);
    let prompt_token =
        encode_point_prompt_tape(tape, point, side, config.channel_dim, &nodes.prompt)?;
    let low = decode_mask_tape(tape, embedding, prompt_token, &nodes.decoder, config)?;
    let up = tape.bilinear_up2(low);
    let probs = tape.sigmoid(up);
    Ok((low, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{combo_loss_node, LossWeights};
    use crate::Mask;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn toy_encoder_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            channel_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            window_size: 0,
            global_attn_indices: vec![],
        }
    }

    fn toy_adapter_config(enable_mha: bool, enable_mlp: bool) -> AdapterConfig {
        AdapterConfig {
            channel_dim: 8,
            bottleneck_dim: 2,
            num_layers: 2,
            enable_mha_adapter: enable_mha,
            enable_mlp_adapter: enable_mlp,
        }
    }

    fn toy_model() -> Model {
        build_model(&toy_encoder_config(), &toy_adapter_config(true, true), 77).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, side: usize) -> Array2<f64> {
        Array2::from_shape_fn((side, side), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn full_forward_shapes_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let model = toy_model();
        let image = rand_image(&mut rng, 8);
        let point = PointPrompt { x: 3, y: 5 };
        let a = model.full_forward(&image, &point).unwrap();
        assert_eq!(a.low_res_logits.dim(), (4, 4));
        assert_eq!(a.full_res_probs.dim(), (8, 8));
        assert!(a.full_res_probs.iter().all(|v| *v > 0.0 && *v < 1.0));
        let b = model.full_forward(&image, &point).unwrap();
        assert_eq!(a.low_res_logits, b.low_res_logits);
        assert_eq!(a.full_res_probs, b.full_res_probs);
    }

    #[test]
    fn fresh_adapters_do_not_change_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let with_adapters = toy_model();
        let without =
            build_model(&toy_encoder_config(), &toy_adapter_config(false, false), 77).unwrap();
        let image = rand_image(&mut rng, 8);
        let point = PointPrompt { x: 1, y: 2 };
        let a = with_adapters.full_forward(&image, &point).unwrap();
        let b = without.full_forward(&image, &point).unwrap();
        assert_eq!(a.full_res_probs, b.full_res_probs);
    }

    #[test]
    fn out_of_frame_inputs_are_rejected() {
        let model = toy_model();
        let bad_image = Array2::zeros((10, 10));
        assert!(model.full_forward(&bad_image, &PointPrompt { x: 0, y: 0 }).is_err());
        let image = Array2::zeros((8, 8));
        assert!(model.full_forward(&image, &PointPrompt { x: 8, y: 0 }).is_err());
        assert!(build_model(&toy_encoder_config(), &toy_adapter_config(true, true), 1)
            .unwrap()
            .full_forward(&image, &PointPrompt { x: 0, y: 0 })
            .is_ok());
        // Mismatched adapter geometry is rejected at build time.
        let mut wrong = toy_adapter_config(true, true);
        wrong.num_layers = 3;
        assert!(build_model(&toy_encoder_config(), &wrong, 1).is_err());
    }

    #[test]
    fn tensor_names_are_unique_and_partition_cleanly() {
        let model = toy_model();
        let mut names = Vec::new();
        model.for_each_tensor(|name, _| names.push(name.to_string()));
        let unique: BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate tensor name");
        for name in &names {
            let frozen = name.starts_with("encoder.");
            let trainable = name.starts_with("adapter.")
                || name.starts_with("prompt.")
                || name.starts_with("decoder.");
            assert!(frozen ^ trainable, "unclassified tensor {name}");
            assert_eq!(is_trainable(name), trainable);
        }

        // Binding enumerates exactly the same names in the same order.
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, is_trainable);
        bind_model(&mut binder, &model);
        let bound: Vec<String> = binder.named.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(bound, names);
    }

    #[test]
    fn trainable_count_matches_enumeration_and_adapter_formula() {
        let model = toy_model();
        let mut by_hand = 0;
        let mut adapter_by_hand = 0;
        model.for_each_tensor(|name, t| {
            if is_trainable(name) {
                by_hand += t.len();
            }
            if name.starts_with("adapter.") {
                adapter_by_hand += t.len();
            }
        });
        assert_eq!(model.trainable_param_count(), by_hand);
        assert_eq!(model.adapter_param_count(), adapter_by_hand);
        assert!(by_hand > adapter_by_hand, "prompt and decoder must contribute");
    }

    #[test]
    fn loss_gradients_stop_at_the_freeze_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut model = toy_model();
        // Nonzero factors so every adapter tensor can receive gradient.
        model.bank.for_each_tensor_mut(|name, t| {
            if name.contains(".layer") {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = 0.05 * (i as f64 + 1.0) - 0.08;
                }
            }
        });
        let image = rand_image(&mut rng, 8);
        let point = PointPrompt { x: 4, y: 4 };
        let mut gt: Mask = Array2::zeros((8, 8));
        for r in 2..6 {
            for c in 2..6 {
                gt[[r, c]] = 1;
            }
        }

        let mut tape = Tape::new();
        let (nodes, named) = {
            let mut binder = Binder::new(&mut tape, is_trainable);
            let nodes = bind_model(&mut binder, &model);
            (nodes, binder.named)
        };
        let (_, probs) = full_forward_tape(&mut tape, &model, &nodes, &image, &point).unwrap();
        let loss = combo_loss_node(&mut tape, probs, &gt, &LossWeights::default());
        let grads = tape.backward(loss);

        let mut frozen_with_grad = 0;
        let mut trainable_with_grad = BTreeSet::new();
        for (name, id) in &named {
            match (is_trainable(name), grads.get(*id)) {
                (false, Some(_)) => frozen_with_grad += 1,
                (true, Some(g)) => {
                    if g.iter().any(|v| *v != 0.0) {
                        let group = name.split('.').next().unwrap().to_string();
                        trainable_with_grad.insert(group);
                    }
                }
                _ => {}
            }
        }
        assert_eq!(frozen_with_grad, 0, "no gradient may reach frozen tensors");
        for group in ["adapter", "prompt", "decoder"] {
            assert!(trainable_with_grad.contains(group), "{group} received no gradient");
        }

        // Finite-difference spot check through the full pipeline, one tensor
        // per trainable component.
        let checks =
            [("adapter.mha.layer0.R", 0, 1), ("prompt.foreground", 0, 2), ("decoder.hyper.fc2.weight", 1, 0)];
        let h = 1e-5;
        for (name, r, c) in checks {
            let id = named.iter().find(|(n, _)| n == name).unwrap().1;
            let grad = grads.get(id).unwrap()[[r, c]];
            let eval = |delta: f64| {
                let mut perturbed = model.clone();
                perturbed.for_each_tensor_mut(|n, t| {
                    if n == name {
                        t[[r, c]] += delta;
                    }
                });
                let pred = perturbed.full_forward(&image, &point).unwrap();
                let mut scratch = Tape::new();
                let p = scratch.constant(pred.full_res_probs);
                let l = combo_loss_node(&mut scratch, p, &gt, &LossWeights::default());
                scratch.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (grad - fd).abs() / (grad.abs().max(fd.abs()) + 1e-8);
            assert!(rel < 1e-4, "{name}: tape {grad} vs fd {fd}");
        }
    }
}
