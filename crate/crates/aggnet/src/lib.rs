//! Depth image completion with attention-guided gated convolutions.
//!
//! The pipeline pairs a light pre-filling autoencoder with a dual-branch
//! encoder-decoder: depth features are gated by contextual attention learned
//! jointly from depth and color in the encoder (AG-GConv), and color skip
//! connections are screened by a local attention gate in the decoder (AG-SC).
//! Everything runs on a small reverse-mode tensor core written here — no
//! external NN framework.
//!
//! Entry points:
//! - [`tensor`]: 4-D tensors, the op graph, and backward.
//! - [`nn`]: VConv / GConv / De-GConv / CA / AG-GConv / AG-SC blocks.
//! - [`model`]: the two-stage completion network.
//! - [`loss`] and [`metrics`]: training losses and RMSE / Rel / delta metrics.
//! - [`synth`]: deterministic RGB-D scene generator and netpbm I/O.
//! - [`train`]: SGD with momentum, plateau schedule, scheme ablations.
//! - [`cli`]: the `aggnet` binary's subcommands.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Real, Shape, Tensor, Var};
