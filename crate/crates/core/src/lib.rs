//! Desk-scale laboratory for learning with noisy labels.
//!
//! The pipeline has two phases. First, an encoder is pre-trained on the
//! training features alone, either self-supervised (SimCLR-style NT-Xent or
//! Barlow Twins) or supervised on a clean proxy set. Second, a short noisy
//! warm-up records per-sample losses, a two-component Gaussian mixture
//! splits the data into probably-clean and probably-noisy subsets, and a
//! semi-supervised stage (DivideMix-style co-training, ELR, or an
//! oracle-split MixMatch) refines the model on that split.
//!
//! Everything in this crate is pure, deterministic under explicit seeds,
//! and `no_std` + `alloc`: no files, no clocks, no threads. File formats,
//! the CLI, and experiment orchestration live in the companion `c2d-lab`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod contrast;
pub mod data;
pub mod divide;
pub mod error;
pub mod graph;
pub(crate) mod math;
pub mod metrics;
pub mod mixtrain;
pub mod model;
pub mod optim;
pub mod runlog;
pub mod seed;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod warmup;

pub use error::{CoreError, Result};
pub use graph::{Tape, Var};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
