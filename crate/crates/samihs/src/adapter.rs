//! Parameter-refactoring adapters: low-rank residual modules whose down/up
//! projections are shared across every transformer block, while a per-layer
//! scale (R) on the bottleneck and shift (B) on the output stay independent.
//! Zero-initialized R and B make a fresh adapter an exact identity.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::nn::Binder;
use crate::util::tensor_seed;
use crate::{Error, Result};

/// Standard deviation for the shared projection init. Small enough that the
/// adapter path stays a gentle perturbation once R moves off zero.
const PROJECTION_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Token feature width c.
    pub channel_dim: usize,
    /// Bottleneck width c′.
    pub bottleneck_dim: usize,
    /// Number of transformer blocks the bank serves.
    pub num_layers: usize,
    pub enable_mha_adapter: bool,
    pub enable_mlp_adapter: bool,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_dim == 0 {
            return Err(Error::Config("channel_dim must be positive".into()));
        }
        if self.bottleneck_dim == 0 || self.bottleneck_dim > self.channel_dim {
            return Err(Error::Config(format!(
                "bottleneck_dim must be in 1..={}, got {}",
                self.channel_dim, self.bottleneck_dim
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        Ok(())
    }

    /// Number of enabled adapter positions (0–2).
    pub fn enabled_positions(&self) -> usize {
        usize::from(self.enable_mha_adapter) + usize::from(self.enable_mlp_adapter)
    }
}

/// Down/up projection pair shared by one adapter position across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection {
    /// c × c′
    pub w_down: Array2<f64>,
    /// c′ × c
    pub w_up: Array2<f64>,
}

/// Per-layer factors: R scales the bottleneck, B shifts the output. Both are
/// broadcast over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// 1 × c′
    pub r: Array2<f64>,
    /// 1 × c
    pub b: Array2<f64>,
}

/// One adapter position: a single shared projection plus L independent factor
/// pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAdapters {
    pub projection: SharedProjection,
    pub factors: Vec<LayerFactors>,
}

/// All adapters for one encoder: at most one position before attention and
/// one before the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    pub config: AdapterConfig,
    pub mha: Option<PositionAdapters>,
    pub mlp: Option<PositionAdapters>,
}

/// m_out = (m_in · W_down) ⊙ R · W_up + B + m_in.
pub fn pr_adapter_forward(
    m_in: &Array2<f64>,
    proj: &SharedProjection,
    factors: &LayerFactors,
) -> Result<Array2<f64>> {
    let c = proj.w_down.nrows();
    let c_prime = proj.w_down.ncols();
    if m_in.ncols() != c {
        return Err(Error::contract(format!(
            "adapter input width {} does not match projection width {c}",
            m_in.ncols()
        )));
    }
    if proj.w_up.dim() != (c_prime, c) {
        return Err(Error::contract("adapter up-projection shape mismatch"));
    }
    if factors.r.dim() != (1, c_prime) || factors.b.dim() != (1, c) {
        return Err(Error::contract("adapter factor shape mismatch"));
    }
    let bottleneck = m_in.dot(&proj.w_down) * &factors.r;
    Ok(bottleneck.dot(&proj.w_up) + &factors.b + m_in)
}

/// Node-side handles for a bound shared projection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SharedProjectionNodes {
    pub w_down: NodeId,
    pub w_up: NodeId,
}

/// Node-side handles for one layer's bound factors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerFactorNodes {
    pub r: NodeId,
    pub b: NodeId,
}

/// Node-side handles for one position: the shared projection plus one factor
/// pair per layer.
#[derive(Debug, Clone)]
pub(crate) struct PositionAdapterNodes {
    pub projection: SharedProjectionNodes,
    pub factors: Vec<LayerFactorNodes>,
}

/// Node-side handles for a bound bank; `None` mirrors a disabled position.
#[derive(Debug, Clone)]
pub(crate) struct AdapterBankNodes {
    pub mha: Option<PositionAdapterNodes>,
    pub mlp: Option<PositionAdapterNodes>,
}

/// Bind every bank tensor under its checkpoint name.
pub(crate) fn bind_adapter_bank(binder: &mut Binder, bank: &AdapterBank) -> AdapterBankNodes {
    let mut bind_position = |position: &str, adapters: &PositionAdapters| PositionAdapterNodes {
        projection: SharedProjectionNodes {
            w_down: binder.bind(format!("adapter.{position}.W_down"), &adapters.projection.w_down),
            w_up: binder.bind(format!("adapter.{position}.W_up"), &adapters.projection.w_up),
        },
        factors: adapters
            .factors
            .iter()
            .enumerate()
            .map(|(l, factors)| LayerFactorNodes {
                r: binder.bind(format!("adapter.{position}.layer{l}.R"), &factors.r),
                b: binder.bind(format!("adapter.{position}.layer{l}.B"), &factors.b),
            })
            .collect(),
    };
    AdapterBankNodes {
        mha: bank.mha.as_ref().map(|a| bind_position("mha", a)),
        mlp: bank.mlp.as_ref().map(|a| bind_position("mlp", a)),
    }
}

/// Tape version of [`pr_adapter_forward`], differentiable through all five
/// inputs.
pub(crate) fn pr_adapter_forward_tape(
    tape: &mut Tape,
    m_in: NodeId,
    proj: &SharedProjectionNodes,
    factors: &LayerFactorNodes,
) -> NodeId {
    let down = tape.matmul(m_in, proj.w_down);
    let scaled = tape.mul_row(down, factors.r);
    let up = tape.matmul(scaled, proj.w_up);
    let shifted = tape.add_row(up, factors.b);
    tape.add(shifted, m_in)
}

/// Deterministically initialize a bank: small-variance zero-mean projections,
/// all-zero factors (every adapter starts as an exact identity).
pub fn init_adapter_bank(config: &AdapterConfig, seed: u64) -> Result<AdapterBank> {
    config.validate()?;
    let c = config.channel_dim;
    let c_prime = config.bottleneck_dim;
    let init_position = |position: &str| -> PositionAdapters {
        let normal = Normal::new(0.0, PROJECTION_INIT_STD).unwrap();
        let sample = |name: String, rows: usize, cols: usize| -> Array2<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &name));
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let projection = SharedProjection {
            w_down: sample(format!("adapter.{position}.W_down"), c, c_prime),
            w_up: sample(format!("adapter.{position}.W_up"), c_prime, c),
        };
        let factors = (0..config.num_layers)
            .map(|_| LayerFactors {
                r: Array2::zeros((1, c_prime)),
                b: Array2::zeros((1, c)),
            })
            .collect();
        PositionAdapters { projection, factors }
    };
    Ok(AdapterBank {
        mha: config.enable_mha_adapter.then(|| init_position("mha")),
        mlp: config.enable_mlp_adapter.then(|| init_position("mlp")),
        config: config.clone(),
    })
}

impl AdapterBank {
    /// Visit every trainable tensor with its checkpoint name.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        for (position, adapters) in [("mha", &self.mha), ("mlp", &self.mlp)] {
            let Some(adapters) = adapters else { continue };
            f(&format!("adapter.{position}.W_down"), &adapters.projection.w_down);
            f(&format!("adapter.{position}.W_up"), &adapters.projection.w_up);
            for (l, factors) in adapters.factors.iter().enumerate() {
                f(&format!("adapter.{position}.layer{l}.R"), &factors.r);
                f(&format!("adapter.{position}.layer{l}.B"), &factors.b);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        for (position, adapters) in [("mha", &mut self.mha), ("mlp", &mut self.mlp)] {
            let Some(adapters) = adapters else { continue };
            f(&format!("adapter.{position}.W_down"), &mut adapters.projection.w_down);
            f(&format!("adapter.{position}.W_up"), &mut adapters.projection.w_up);
            for (l, factors) in adapters.factors.iter_mut().enumerate() {
                f(&format!("adapter.{position}.layer{l}.R"), &mut factors.r);
                f(&format!("adapter.{position}.layer{l}.B"), &mut factors.b);
            }
        }
    }
}

/// Closed-form trainable parameter count:
/// A·(c·c′ + c′·c) + A·L·(c′ + c) with A the number of enabled positions.
pub fn count_trainable_params(bank: &AdapterBank) -> usize {
    let c = bank.config.channel_dim;
    let c_prime = bank.config.bottleneck_dim;
    let l = bank.config.num_layers;
    let a = bank.config.enabled_positions();
    a * (c * c_prime + c_prime * c) + a * l * (c_prime + c)
}
