//! Masked Modeling Duo (M2D) self-supervised audio pre-training and its
//! M2D-X extension with an application-specific offline network.
//!
//! The crate covers the whole desk-scale pipeline: log-mel frontend,
//! patching and masking, online/target/predictor networks on a small tape
//! autograd, the training step, the three offline-network scenarios,
//! feature transfer utilities, a linear-probe harness, configuration,
//! checkpoints and the `m2d` command-line tool.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features_io;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod offline;
pub mod patching;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod transfer;

pub use error::{M2dError, Result};
