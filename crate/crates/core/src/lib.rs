//! Desk-scale transformer laboratory.
//!
//! Implements the two residual/layer-normalization orders of the encoder-decoder
//! transformer (post-norm `V1`, pre-norm `V2`), Glorot and Lipschitz-constrained
//! uniform initialization, residual-stream diagnostics, and a small training
//! harness on synthetic sequence tasks.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod init;
pub mod layers;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};

/// Crate version echoed into every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
