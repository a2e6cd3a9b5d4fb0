//! Point-prompt encoding and the mask decoder. A single foreground click is
//! embedded as a sinusoidal code of its normalized coordinates plus a learned
//! type embedding; the decoder lets the prompt token read the image tokens
//! through cross-attention, expands tokens back to pixels, and scores each
//! pixel against a prompt-conditioned classifier produced by a small
//! hypernetwork. Everything in this module is trainable under the default
//! fine-tuning policy.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{bilinear_upsample2, NodeId, Tape};
use crate::backbone::{
    bind_layer_norm, bind_linear, bind_mlp, EncoderConfig, LayerNormParams, LinearParams,
    MlpParams,
};
use crate::backbone::{bind_attention, AttentionParams};
use crate::data::PointPrompt;
use crate::nn::{self, AttentionNodes, Binder, LayerNormNodes, LinearNodes, MlpNodes};
use crate::util::tensor_seed;
use crate::{Error, Result};

/// Init scale for the learned foreground embedding.
const FOREGROUND_INIT_STD: f64 = 0.02;

/// Number of cross-attention layers in the decoder.
const NUM_DECODER_LAYERS: usize = 2;

/// Low-resolution logits and the final upsampled probability map.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// Logits at half the original image resolution.
    pub low_res_logits: Array2<f64>,
    /// Sigmoid probabilities at the original image resolution.
    pub full_res_probs: Array2<f64>,
}

/// Learned prompt-side tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// 1 x c embedding added to every foreground point code.
    pub foreground: Array2<f64>,
}

/// One decoder layer: the prompt token attends to the image tokens, then
/// passes through an MLP, both with pre-norm residual wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// All decoder tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<CrossLayerParams>,
    /// Token-to-pixel expansion: weight c x (s^2 * c_up), bias 1 x c_up.
    pub expand: LinearParams,
    /// Hypernetwork mapping the refined prompt token to pixel-classifier
    /// weights: c -> c -> c_up.
    pub hyper: MlpParams,
    /// Scalar bias added to every logit.
    pub mask_bias: Array2<f64>,
}

impl PromptParams {
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        f("prompt.foreground", &self.foreground);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        f("prompt.foreground", &mut self.foreground);
    }
}

impl DecoderParams {
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        let mut g = |name: String, t: &Array2<f64>| f(&name, t);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("decoder.layer{i}");
            layer.ln1.visit_named(&format!("{p}.ln1"), &mut g);
            layer.attn.visit_named(&format!("{p}.attn"), &mut g);
            layer.ln2.visit_named(&format!("{p}.ln2"), &mut g);
            layer.mlp.visit_named(&format!("{p}.mlp"), &mut g);
        }
        self.expand.visit_named("decoder.expand", &mut g);
        self.hyper.visit_named("decoder.hyper", &mut g);
        g("decoder.mask_bias".to_string(), &self.mask_bias);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        let mut g = |name: String, t: &mut Array2<f64>| f(&name, t);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("decoder.layer{i}");
            layer.ln1.visit_named_mut(&format!("{p}.ln1"), &mut g);
            layer.attn.visit_named_mut(&format!("{p}.attn"), &mut g);
            layer.ln2.visit_named_mut(&format!("{p}.ln2"), &mut g);
            layer.mlp.visit_named_mut(&format!("{p}.mlp"), &mut g);
        }
        self.expand.visit_named_mut("decoder.expand", &mut g);
        self.hyper.visit_named_mut("decoder.hyper", &mut g);
        g("decoder.mask_bias".to_string(), &mut self.mask_bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CrossLayerNodes {
    pub ln1: LayerNormNodes,
    pub attn: AttentionNodes,
    pub ln2: LayerNormNodes,
    pub mlp: MlpNodes,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderNodes {
    pub layers: Vec<CrossLayerNodes>,
    pub expand: LinearNodes,
    pub hyper: MlpNodes,
    pub mask_bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PromptNodes {
    pub foreground: NodeId,
}

pub(crate) fn bind_prompt(binder: &mut Binder, p: &PromptParams) -> PromptNodes {
    PromptNodes { foreground: binder.bind("prompt.foreground".to_string(), &p.foreground) }
}

pub(crate) fn bind_decoder(binder: &mut Binder, p: &DecoderParams) -> DecoderNodes {
    let layers = p
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let prefix = format!("decoder.layer{i}");
            CrossLayerNodes {
                ln1: bind_layer_norm(binder, &format!("{prefix}.ln1"), &layer.ln1),
                attn: bind_attention(binder, &format!("{prefix}.attn"), &layer.attn),
                ln2: bind_layer_norm(binder, &format!("{prefix}.ln2"), &layer.ln2),
                mlp: bind_mlp(binder, &format!("{prefix}.mlp"), &layer.mlp),
            }
        })
        .collect();
    DecoderNodes {
        layers,
        expand: bind_linear(binder, "decoder.expand", &p.expand),
        hyper: bind_mlp(binder, "decoder.hyper", &p.hyper),
        mask_bias: binder.bind("decoder.mask_bias".to_string(), &p.mask_bias),
    }
}

/// Pixels produced per token side: the expansion brings the grid to a quarter
/// of `image_size`, which is half the original input resolution.
pub(crate) fn upscale_stride(config: &EncoderConfig) -> Result<usize> {
    if config.patch_size % 4 != 0 {
        return Err(Error::contract("patch_size must be a multiple of 4 for the mask head"));
    }
    Ok(config.patch_size / 4)
}

/// Channel width of the expanded pixel features.
pub(crate) fn upscale_channels(channel_dim: usize) -> usize {
    (channel_dim / 2).max(1)
}

/// Side length of the low-resolution logit map (half the raw input side).
pub fn low_res_side(config: &EncoderConfig) -> Result<usize> {
    Ok(config.grid_side() * upscale_stride(config)?)
}

/// Sinusoidal code of normalized coordinates (u, v) in [0, 1]: the first half
/// of the channels holds sin/cos pairs of u at doubling frequencies, the
/// second half the same for v. Requires the width to be a multiple of 4.
pub(crate) fn point_positional_encoding(u: f64, v: f64, channel_dim: usize) -> Array2<f64> {
    debug_assert!(channel_dim % 4 == 0);
    let pairs = channel_dim / 4;
    let mut code = Array2::zeros((1, channel_dim));
    for (half, coord) in [(0, u), (1, v)] {
        let base = half * 2 * pairs;
        for t in 0..pairs {
            let angle = coord * std::f64::consts::PI * (1 << t) as f64;
            code[[0, base + 2 * t]] = angle.sin();
            code[[0, base + 2 * t + 1]] = angle.cos();
        }
    }
    code
}

fn check_prompt_geometry(p: &PointPrompt, input_size: usize, channel_dim: usize) -> Result<()> {
    if channel_dim % 4 != 0 {
        return Err(Error::contract("channel_dim must be a multiple of 4 for point encoding"));
    }
    if p.x >= input_size || p.y >= input_size {
        return Err(Error::contract("point prompt lies outside the image"));
    }
    Ok(())
}

/// Embed one foreground click given in original (pre-upsampling) pixel
/// coordinates. The positional part depends only on the normalized position,
/// so the same relative click on different image sizes encodes identically.
pub fn encode_point_prompt(
    p: &PointPrompt,
    input_size: usize,
    params: &PromptParams,
) -> Result<Array2<f64>> {
    let channel_dim = params.foreground.ncols();
    check_prompt_geometry(p, input_size, channel_dim)?;
    let u = p.x as f64 / input_size as f64;
    let v = p.y as f64 / input_size as f64;
    Ok(point_positional_encoding(u, v, channel_dim) + &params.foreground)
}

/// Tape counterpart: the positional code enters as a constant; only the
/// learned embedding carries gradients.
pub(crate) fn encode_point_prompt_tape(
    tape: &mut Tape,
    p: &PointPrompt,
    input_size: usize,
    channel_dim: usize,
    prompt: &PromptNodes,
) -> Result<NodeId> {
    check_prompt_geometry(p, input_size, channel_dim)?;
    let u = p.x as f64 / input_size as f64;
    let v = p.y as f64 / input_size as f64;
    let code = tape.constant(point_positional_encoding(u, v, channel_dim));
    Ok(tape.add(code, prompt.foreground))
}

/// Decoder forward on the tape: refine the prompt token against the image
/// tokens, expand tokens to half-input-resolution pixel features, then score
/// every pixel with the hypernetwork-generated classifier.
pub(crate) fn decode_mask_tape(
    tape: &mut Tape,
    image_tokens: NodeId,
    prompt_token: NodeId,
    dec: &DecoderNodes,
    config: &EncoderConfig,
) -> Result<NodeId> {
    let stride = upscale_stride(config)?;
    let side = config.grid_side() * stride;
    let mut token = prompt_token;
    for layer in &dec.layers {
        let normed = nn::layer_norm(tape, token, &layer.ln1);
        let attended =
            nn::multi_head_attention(tape, normed, image_tokens, &layer.attn, config.num_heads);
        token = tape.add(attended, token);
        let normed2 = nn::layer_norm(tape, token, &layer.ln2);
        let refined = nn::mlp(tape, normed2, &layer.mlp);
        token = tape.add(refined, token);
    }
    let expanded = tape.patch_expand(image_tokens, dec.expand.weight, config.grid_side(), stride);
    let expanded = tape.add_row(expanded, dec.expand.bias);
    let features = tape.gelu(expanded);
    let classifier = nn::mlp(tape, token, &dec.hyper);
    let logits = tape.matmul_nt(features, classifier);
    let logits = tape.add_row(logits, dec.mask_bias);
    Ok(tape.reshape(logits, side, side))
}

/// Evaluate the decoder on plain values (same op sequence as training).
pub fn decode_mask(
    image_tokens: &Array2<f64>,
    prompt: &Array2<f64>,
    dec: &DecoderParams,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    let c = config.channel_dim;
    if image_tokens.dim() != (config.num_tokens(), c) {
        return Err(Error::contract("image token shape does not match encoder config"));
    }
    if prompt.dim() != (1, c) {
        return Err(Error::contract("prompt embedding width does not match encoder config"));
    }
    let mut tape = Tape::new();
    let tokens_node = tape.constant(image_tokens.clone());
    let prompt_node = tape.constant(prompt.clone());
    let dec_nodes = {
        let mut binder = Binder::all_frozen(&mut tape);
        bind_decoder(&mut binder, dec)
    };
    let out = decode_mask_tape(&mut tape, tokens_node, prompt_node, &dec_nodes, config)?;
    Ok(tape.value(out).clone())
}

/// Upsample low-resolution logits to full resolution and squash to
/// probabilities.
pub fn finalize_prediction(low_res_logits: Array2<f64>) -> MaskPrediction {
    let full = bilinear_upsample2(&low_res_logits);
    let full_res_probs = full.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    MaskPrediction { low_res_logits, full_res_probs }
}

/// Deterministic per-tensor initialization of the prompt embedding.
pub fn init_prompt_params(config: &EncoderConfig, seed: u64) -> Result<PromptParams> {
    config.validate()?;
    if config.channel_dim % 4 != 0 {
        return Err(Error::contract("channel_dim must be a multiple of 4 for point encoding"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, "prompt.foreground"));
    let normal = Normal::new(0.0, FOREGROUND_INIT_STD).unwrap();
    Ok(PromptParams {
        foreground: Array2::from_shape_fn((1, config.channel_dim), |_| normal.sample(&mut rng)),
    })
}

/// Deterministic per-tensor initialization of the decoder: fan-in-scaled
/// normal projections, identity layer norms, zero biases, zero mask bias.
pub fn init_decoder_params(config: &EncoderConfig, seed: u64) -> Result<DecoderParams> {
    config.validate()?;
    upscale_stride(config)?;
    let c = config.channel_dim;
    let hidden = 2 * c;
    let c_up = upscale_channels(c);
    let stride = config.patch_size / 4;
    let gauss = |name: String, rows: usize, cols: usize, std: f64| -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &name));
        let normal = Normal::new(0.0, std).unwrap();
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
    };
    let linear = |name: &str, rows: usize, cols: usize| LinearParams {
        weight: gauss(format!("{name}.weight"), rows, cols, (1.0 / rows as f64).sqrt()),
        bias: Array2::zeros((1, cols)),
    };
    let layer_norm = || LayerNormParams { gamma: Array2::ones((1, c)), beta: Array2::zeros((1, c)) };
    let layers = (0..NUM_DECODER_LAYERS)
        .map(|i| {
            let p = format!("decoder.layer{i}");
            CrossLayerParams {
                ln1: layer_norm(),
                attn: AttentionParams {
                    query: linear(&format!("{p}.attn.query"), c, c),
                    key: linear(&format!("{p}.attn.key"), c, c),
                    value: linear(&format!("{p}.attn.value"), c, c),
                    output: linear(&format!("{p}.attn.output"), c, c),
                },
                ln2: layer_norm(),
                mlp: MlpParams {
                    fc1: linear(&format!("{p}.mlp.fc1"), c, hidden),
                    fc2: linear(&format!("{p}.mlp.fc2"), hidden, c),
                },
            }
        })
        .collect();
    Ok(DecoderParams {
        layers,
        expand: linear("decoder.expand", c, stride * stride * c_up),
        hyper: MlpParams {
            fc1: linear("decoder.hyper.fc1", c, c),
            fc2: linear("decoder.hyper.fc2", c, c_up),
        },
        mask_bias: Array2::zeros((1, 1)),
    })
}
