//! SAMIHS-style parameter-efficient fine-tuning for promptable segmentation.
//!
//! The crate wires weight-shared parameter-refactoring adapters into a frozen
//! vision-transformer encoder, decodes masks from a single foreground point
//! prompt, and trains the adapter/prompt/decoder parameters with a
//! boundary-sensitive combo loss. Everything runs on f64 CPU math through a
//! small reverse-mode tape so gradients can be checked against finite
//! differences and training stays bitwise reproducible.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod container;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
mod nn;
pub mod optim;
pub mod prompt_mask;
pub mod train;
pub(crate) mod util;

pub use error::{Error, Result};

/// Binary segmentation mask; nonzero entries are foreground.
pub type Mask = ndarray::Array2<u8>;
