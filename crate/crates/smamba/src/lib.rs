//! Camouflage-grade binary segmentation built from first principles.
//!
//! The pipeline: a multi-scale convolution pyramid pooled into channel
//! sequences and refined by gated selective-scan (Mamba) layers forms a
//! domain prior; the prior is injected into a frozen ViT image encoder
//! through zero-initialized cross-attention adapters; an encoder-side head
//! emits a pseudo mask that prompts a two-way cross-attention decoder; the
//! whole thing trains in two stages against a boundary-weighted
//! Dice + BCE objective and is scored with six binary-segmentation
//! metrics. All numerics (dense tensors, reverse-mode autodiff, kernels,
//! metrics) are self-contained; see the `examples/` directory for one
//! runnable walkthrough per capability and `src/bin/smamba.rs` for the CLI.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod prior;
pub mod rng;
pub mod scan;
pub mod tensor;

pub use error::{Error, Result};
