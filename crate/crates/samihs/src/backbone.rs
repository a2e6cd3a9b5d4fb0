//! Vision-transformer image encoder with adapter attachment points. Blocks
//! use pre-norm wiring with the adapter inserted between the layer norm and
//! the attention / MLP sublayer; windowed attention partitions tokens after
//! the adapter and restores order afterwards. Every encoder tensor sits on
//! the frozen side of the fine-tuning boundary.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{
    bind_adapter_bank, pr_adapter_forward_tape, AdapterBank, AdapterBankNodes,
};
use crate::autodiff::{bilinear_upsample2, NodeId, Tape};
use crate::nn::{
    self, AttentionNodes, Binder, LayerNormNodes, LinearNodes, MlpNodes,
};
use crate::util::tensor_seed;
use crate::{Error, Result};

/// Positional-embedding init scale (projection weights use fan-in scaling).
const POS_INIT_STD: f64 = 0.02;

/// Geometry and width of the encoder. `image_size` is the side length after
/// the 2x input upsampling, so raw inputs are `image_size/2` on a side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channel_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `channel_dim`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Side length of attention windows in tokens; 0 means global attention.
    #[serde(default)]
    pub window_size: usize,
    /// Blocks that keep global attention even when `window_size > 0`.
    #[serde(default)]
    pub global_attn_indices: Vec<usize>,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 2 != 0 {
            return Err(Error::contract("image_size must be a positive even integer"));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::contract("patch_size must divide image_size"));
        }
        if self.channel_dim == 0 || self.num_layers == 0 {
            return Err(Error::contract("channel_dim and num_layers must be positive"));
        }
        if self.num_heads == 0 || self.channel_dim % self.num_heads != 0 {
            return Err(Error::contract("num_heads must divide channel_dim"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::contract("mlp_ratio must be positive"));
        }
        if self.window_size > 0 && self.grid_side() % self.window_size != 0 {
            return Err(Error::contract("window_size must divide the token grid side"));
        }
        if self.global_attn_indices.iter().any(|&l| l >= self.num_layers) {
            return Err(Error::contract("global_attn_indices out of range"));
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn hidden_dim(&self) -> usize {
        self.channel_dim * self.mlp_ratio
    }

    /// Raw input side length expected by [`encode_image`].
    pub fn input_size(&self) -> usize {
        self.image_size / 2
    }
}

/// One linear layer: `weight` is in x out, `bias` is 1 x out.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// All tensors of one transformer block; frozen during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// Patch embedding, positional embedding, blocks, and output neck.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch: LinearParams,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub neck: LinearParams,
}

impl LinearParams {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl LayerNormParams {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

impl AttentionParams {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        self.query.visit_named(&format!("{prefix}.query"), f);
        self.key.visit_named(&format!("{prefix}.key"), f);
        self.value.visit_named(&format!("{prefix}.value"), f);
        self.output.visit_named(&format!("{prefix}.output"), f);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Array2<f64>)) {
        self.query.visit_named_mut(&format!("{prefix}.query"), f);
        self.key.visit_named_mut(&format!("{prefix}.key"), f);
        self.value.visit_named_mut(&format!("{prefix}.value"), f);
        self.output.visit_named_mut(&format!("{prefix}.output"), f);
    }
}

impl MlpParams {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        self.fc1.visit_named(&format!("{prefix}.fc1"), f);
        self.fc2.visit_named(&format!("{prefix}.fc2"), f);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Array2<f64>)) {
        self.fc1.visit_named_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_named_mut(&format!("{prefix}.fc2"), f);
    }
}

impl BlockParams {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        self.ln1.visit_named(&format!("{prefix}.ln1"), f);
        self.attn.visit_named(&format!("{prefix}.attn"), f);
        self.ln2.visit_named(&format!("{prefix}.ln2"), f);
        self.mlp.visit_named(&format!("{prefix}.mlp"), f);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Array2<f64>)) {
        self.ln1.visit_named_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_named_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_named_mut(&format!("{prefix}.ln2"), f);
        self.mlp.visit_named_mut(&format!("{prefix}.mlp"), f);
    }
}

impl EncoderParams {
    /// Visit every encoder tensor with its checkpoint name, in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        let mut g = |name: String, t: &Array2<f64>| f(&name, t);
        self.patch.visit_named("encoder.patch", &mut g);
        g("encoder.pos".to_string(), &self.pos);
        for (l, block) in self.blocks.iter().enumerate() {
            block.visit_named(&format!("encoder.block{l}"), &mut g);
        }
        self.neck.visit_named("encoder.neck", &mut g);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        let mut g = |name: String, t: &mut Array2<f64>| f(&name, t);
        self.patch.visit_named_mut("encoder.patch", &mut g);
        g("encoder.pos".to_string(), &mut self.pos);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.visit_named_mut(&format!("encoder.block{l}"), &mut g);
        }
        self.neck.visit_named_mut("encoder.neck", &mut g);
    }
}

/// Node-side handles for one bound block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockNodes {
    pub ln1: LayerNormNodes,
    pub attn: AttentionNodes,
    pub ln2: LayerNormNodes,
    pub mlp: MlpNodes,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderNodes {
    pub patch: LinearNodes,
    pub pos: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub neck: LinearNodes,
}

pub(crate) fn bind_linear(binder: &mut Binder, prefix: &str, p: &LinearParams) -> LinearNodes {
    LinearNodes {
        weight: binder.bind(format!("{prefix}.weight"), &p.weight),
        bias: binder.bind(format!("{prefix}.bias"), &p.bias),
    }
}

pub(crate) fn bind_layer_norm(
    binder: &mut Binder,
    prefix: &str,
    p: &LayerNormParams,
) -> LayerNormNodes {
    LayerNormNodes {
        gamma: binder.bind(format!("{prefix}.gamma"), &p.gamma),
        beta: binder.bind(format!("{prefix}.beta"), &p.beta),
    }
}

pub(crate) fn bind_attention(
    binder: &mut Binder,
    prefix: &str,
    p: &AttentionParams,
) -> AttentionNodes {
    AttentionNodes {
        query: bind_linear(binder, &format!("{prefix}.query"), &p.query),
        key: bind_linear(binder, &format!("{prefix}.key"), &p.key),
        value: bind_linear(binder, &format!("{prefix}.value"), &p.value),
        output: bind_linear(binder, &format!("{prefix}.output"), &p.output),
    }
}

pub(crate) fn bind_mlp(binder: &mut Binder, prefix: &str, p: &MlpParams) -> MlpNodes {
    MlpNodes {
        fc1: bind_linear(binder, &format!("{prefix}.fc1"), &p.fc1),
        fc2: bind_linear(binder, &format!("{prefix}.fc2"), &p.fc2),
    }
}

pub(crate) fn bind_block(binder: &mut Binder, prefix: &str, p: &BlockParams) -> BlockNodes {
    BlockNodes {
        ln1: bind_layer_norm(binder, &format!("{prefix}.ln1"), &p.ln1),
        attn: bind_attention(binder, &format!("{prefix}.attn"), &p.attn),
        ln2: bind_layer_norm(binder, &format!("{prefix}.ln2"), &p.ln2),
        mlp: bind_mlp(binder, &format!("{prefix}.mlp"), &p.mlp),
    }
}

pub(crate) fn bind_encoder(binder: &mut Binder, p: &EncoderParams) -> EncoderNodes {
    let patch = bind_linear(binder, "encoder.patch", &p.patch);
    let pos = binder.bind("encoder.pos".to_string(), &p.pos);
    let blocks = p
        .blocks
        .iter()
        .enumerate()
        .map(|(l, block)| bind_block(binder, &format!("encoder.block{l}"), block))
        .collect();
    let neck = bind_linear(binder, "encoder.neck", &p.neck);
    EncoderNodes { patch, pos, blocks, neck }
}

/// Bilinear 2x upsampling of a grayscale image (half-pixel sample centers,
/// border-clamped). Output values stay inside the input's value range.
pub fn upsample_input(x: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = x.dim();
    if h < 2 || w < 2 {
        return Err(Error::contract("upsample_input requires at least a 2x2 image"));
    }
    Ok(bilinear_upsample2(x))
}

/// Flatten non-overlapping `patch_size` squares into rows: token (gr, gc)
/// becomes row gr*grid+gc, with the patch itself laid out row-major.
pub fn patchify(x_up: &Array2<f64>, patch_size: usize) -> Result<Array2<f64>> {
    let (h, w) = x_up.dim();
    if patch_size == 0 || h != w || h % patch_size != 0 {
        return Err(Error::contract("patchify requires a square image divisible by patch_size"));
    }
    let grid = h / patch_size;
    let mut out = Array2::zeros((grid * grid, patch_size * patch_size));
    for gr in 0..grid {
        for gc in 0..grid {
            let row = gr * grid + gc;
            for dr in 0..patch_size {
                for dc in 0..patch_size {
                    out[[row, dr * patch_size + dc]] =
                        x_up[[gr * patch_size + dr, gc * patch_size + dc]];
                }
            }
        }
    }
    Ok(out)
}

/// Row order that groups tokens of a `grid` x `grid` layout into contiguous
/// `window` x `window` windows (windows row-major, tokens row-major inside).
pub(crate) fn window_permutation(grid: usize, window: usize) -> Vec<usize> {
    debug_assert!(window > 0 && grid % window == 0);
    let windows = grid / window;
    let mut perm = Vec::with_capacity(grid * grid);
    for wr in 0..windows {
        for wc in 0..windows {
            for r in 0..window {
                for c in 0..window {
                    perm.push((wr * window + r) * grid + (wc * window + c));
                }
            }
        }
    }
    perm
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn uses_window(config: &EncoderConfig, layer_index: usize) -> bool {
    config.window_size > 0 && !config.global_attn_indices.contains(&layer_index)
}

/// Self-attention over all tokens, or independently inside each window when
/// this layer is windowed. The partition groups window tokens contiguously,
/// attends per window, and restores the original token order.
fn attention_with_windows(
    tape: &mut Tape,
    x: NodeId,
    attn: &AttentionNodes,
    config: &EncoderConfig,
    layer_index: usize,
) -> NodeId {
    if !uses_window(config, layer_index) {
        return nn::multi_head_attention(tape, x, x, attn, config.num_heads);
    }
    let grid = config.grid_side();
    let window = config.window_size;
    let perm = window_permutation(grid, window);
    let grouped = tape.gather_rows(x, &perm);
    let per_window = window * window;
    let num_windows = perm.len() / per_window;
    let mut outputs = Vec::with_capacity(num_windows);
    for k in 0..num_windows {
        let rows: Vec<usize> = (k * per_window..(k + 1) * per_window).collect();
        let win = tape.gather_rows(grouped, &rows);
        outputs.push(nn::multi_head_attention(tape, win, win, attn, config.num_heads));
    }
    let merged = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs) };
    tape.gather_rows(merged, &inverse_permutation(&perm))
}

/// Pre-norm block with adapters between norm and sublayer:
/// m' = MHA(PR_mha(LN(m))) + m, then m'' = MLP(PR_mlp(LN(m'))) + m'.
/// A disabled position routes the normed tokens straight through.
pub(crate) fn modified_block_forward_tape(
    tape: &mut Tape,
    x: NodeId,
    block: &BlockNodes,
    bank: &AdapterBankNodes,
    layer_index: usize,
    config: &EncoderConfig,
) -> NodeId {
    let normed = nn::layer_norm(tape, x, &block.ln1);
    let adapted = match &bank.mha {
        Some(pos) => pr_adapter_forward_tape(tape, normed, &pos.projection, &pos.factors[layer_index]),
        None => normed,
    };
    let attn_out = attention_with_windows(tape, adapted, &block.attn, config, layer_index);
    let after_attn = tape.add(attn_out, x);
    let normed2 = nn::layer_norm(tape, after_attn, &block.ln2);
    let adapted2 = match &bank.mlp {
        Some(pos) => {
            pr_adapter_forward_tape(tape, normed2, &pos.projection, &pos.factors[layer_index])
        }
        None => normed2,
    };
    let mlp_out = nn::mlp(tape, adapted2, &block.mlp);
    tape.add(mlp_out, after_attn)
}

/// Patch projection plus positional embedding.
pub(crate) fn embed_patches_tape(tape: &mut Tape, patches: NodeId, enc: &EncoderNodes) -> NodeId {
    let tokens = nn::linear(tape, patches, &enc.patch);
    tape.add(tokens, enc.pos)
}

/// Upsampled image (as pre-extracted patch rows) -> embedded tokens ->
/// modified blocks -> neck projection.
pub(crate) fn encode_image_tape(
    tape: &mut Tape,
    patches: NodeId,
    enc: &EncoderNodes,
    bank: &AdapterBankNodes,
    config: &EncoderConfig,
) -> NodeId {
    let mut tokens = embed_patches_tape(tape, patches, enc);
    for (l, block) in enc.blocks.iter().enumerate() {
        tokens = modified_block_forward_tape(tape, tokens, block, bank, l, config);
    }
    nn::linear(tape, tokens, &enc.neck)
}

fn check_bank_compat(config: &EncoderConfig, bank: &AdapterBank) -> Result<()> {
    if bank.config.channel_dim != config.channel_dim
        || bank.config.num_layers != config.num_layers
    {
        return Err(Error::contract("adapter bank does not match encoder width/depth"));
    }
    Ok(())
}

/// Evaluate one modified block on plain values. Runs the exact same op
/// sequence as the training path, so results match bitwise.
pub fn modified_block_forward(
    m_prev: &Array2<f64>,
    block: &BlockParams,
    bank: &AdapterBank,
    layer_index: usize,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    check_bank_compat(config, bank)?;
    if layer_index >= config.num_layers {
        return Err(Error::contract("layer_index out of range"));
    }
    if m_prev.ncols() != config.channel_dim {
        return Err(Error::contract("token width does not match channel_dim"));
    }
    if uses_window(config, layer_index) && m_prev.nrows() != config.num_tokens() {
        return Err(Error::contract("windowed attention requires the full token grid"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(m_prev.clone());
    let (block_nodes, bank_nodes) = {
        let mut binder = Binder::all_frozen(&mut tape);
        let block_nodes = bind_block(&mut binder, "block", block);
        let bank_nodes = bind_adapter_bank(&mut binder, bank);
        (block_nodes, bank_nodes)
    };
    let out = modified_block_forward_tape(&mut tape, x, &block_nodes, &bank_nodes, layer_index, config);
    Ok(tape.value(out).clone())
}

/// Patch-embed an already-upsampled image: patchify, frozen linear
/// projection, positional embedding.
pub fn patch_embed(
    x_up: &Array2<f64>,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    if x_up.dim() != (config.image_size, config.image_size) {
        return Err(Error::contract("patch_embed input does not match image_size"));
    }
    let patches = patchify(x_up, config.patch_size)?;
    if params.patch.weight.nrows() != patches.ncols() {
        return Err(Error::contract("patch projection width mismatch"));
    }
    let mut tokens = patches.dot(&params.patch.weight);
    tokens += &params.patch.bias;
    tokens += &params.pos;
    Ok(tokens)
}

/// Full encoder on a raw (pre-upsampling) image.
pub fn encode_image(
    x: &Array2<f64>,
    params: &EncoderParams,
    bank: &AdapterBank,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    check_bank_compat(config, bank)?;
    let side = config.input_size();
    if x.dim() != (side, side) {
        return Err(Error::contract("input image does not match configured size"));
    }
    let up = upsample_input(x)?;
    let patches = patchify(&up, config.patch_size)?;
    let mut tape = Tape::new();
    let patches_node = tape.constant(patches);
    let (enc_nodes, bank_nodes) = {
        let mut binder = Binder::all_frozen(&mut tape);
        let enc_nodes = bind_encoder(&mut binder, params);
        let bank_nodes = bind_adapter_bank(&mut binder, bank);
        (enc_nodes, bank_nodes)
    };
    let out = encode_image_tape(&mut tape, patches_node, &enc_nodes, &bank_nodes, config);
    Ok(tape.value(out).clone())
}

/// Deterministic per-tensor initialization: fan-in-scaled normal projections,
/// small normal positional embedding, identity layer norms, zero biases.
pub fn init_encoder_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let c = config.channel_dim;
    let patch_in = config.patch_size * config.patch_size;
    let hidden = config.hidden_dim();
    let gauss = |name: String, rows: usize, cols: usize, std: f64| -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &name));
        let normal = Normal::new(0.0, std).unwrap();
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
    };
    let fan_in = |n: usize| (1.0 / n as f64).sqrt();
    let linear = |name: &str, rows: usize, cols: usize| LinearParams {
        weight: gauss(format!("{name}.weight"), rows, cols, fan_in(rows)),
        bias: Array2::zeros((1, cols)),
    };
    let layer_norm = |_name: &str| LayerNormParams {
        gamma: Array2::ones((1, c)),
        beta: Array2::zeros((1, c)),
    };
    let blocks = (0..config.num_layers)
        .map(|l| {
            let p = format!("encoder.block{l}");
            BlockParams {
                ln1: layer_norm(&format!("{p}.ln1")),
                attn: AttentionParams {
                    query: linear(&format!("{p}.attn.query"), c, c),
                    key: linear(&format!("{p}.attn.key"), c, c),
                    value: linear(&format!("{p}.attn.value"), c, c),
                    output: linear(&format!("{p}.attn.output"), c, c),
                },
                ln2: layer_norm(&format!("{p}.ln2")),
                mlp: MlpParams {
                    fc1: linear(&format!("{p}.mlp.fc1"), c, hidden),
                    fc2: linear(&format!("{p}.mlp.fc2"), hidden, c),
                },
            }
        })
        .collect();
    Ok(EncoderParams {
        patch: linear("encoder.patch", patch_in, c),
        pos: gauss("encoder.pos".to_string(), config.num_tokens(), c, POS_INIT_STD),
        blocks,
        neck: linear("encoder.neck", c, c),
    })
}
