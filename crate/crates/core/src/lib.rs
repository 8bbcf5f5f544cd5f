//! Desk-scale kit for gated convolution blocks, selective state-space
//! mixing and attention, built on a small reverse-mode tensor engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, forward kernels, a recording [`tensor::Graph`]
//!   with reverse-mode differentiation, and a finite-difference oracle.
//! - [`mixers`]: partial-channel depthwise convolution, the selective scan
//!   (sequential and work-efficient parallel), and masked attention.
//! - [`blocks`]: the gated block (conv / SSM / identity mixers), the
//!   pre-norm transformer block and stochastic depth.
//! - [`models`]: the MambaOut presets, a toy isotropic transformer, and the
//!   binary checkpoint format.
//! - [`audit`]: parameter/MAC counting and the attention cost ratio.
//! - [`harness`]: synthetic data, AdamW, cosine schedule, training and the
//!   mixing-mode comparison.

pub mod audit;
pub mod blocks;
mod error;
pub mod harness;
pub mod mixers;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, Tensor, Var};
