// SPDX-License-Identifier: MIT OR Apache-2.0

//! # msae
//!
//! Sparse autoencoders over dense embedding vectors: ReLU (L1), TopK,
//! BatchTopK and Matryoshka (nested multi-granularity TopK) variants.
//!
//! The crate covers the whole loop:
//!
//! - [`embedset`] loads, normalizes and synthesizes embedding matrices
//!   (EMB1 files, per-modality normalization statistics, a sparse-dictionary
//!   ground-truth generator);
//! - [`sae`] holds parameters, the forward pass for every variant, the losses
//!   and their analytic gradients;
//! - [`train`] runs AdamW with gradient clipping and unit-norm decoder
//!   columns, and reads/writes SAE1 checkpoints;
//! - [`metrics`] computes L0, FVU/EVR, cosine fidelity, CKNNA, decoder
//!   orthogonality, dead neurons, linear-probe agreement, progressive
//!   recovery and activation histograms;
//! - [`concepts`] names latent directions against a concept vocabulary;
//! - [`apps`] provides dual-space similarity search, concept manipulation and
//!   classifier bias sweeps;
//! - [`cli`] and [`service`] expose all of it from the command line and over
//!   HTTP.
//!
//! ```text
//! preact = (x - b_pre) W_enc^T + b_enc
//! z_i    = ReLU(TopK_{k_i}(preact))      i = 1..h   (one level for non-Matryoshka)
//! x_i    = z_i W_dec^T + b_pre
//! loss   = mean_batch sum_i alpha_i ||x - x_i||^2
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apps;
pub mod cli;
pub mod concepts;
pub mod embedset;
pub mod error;
pub mod metrics;
pub mod sae;
pub mod service;
pub mod train;

pub use embedset::{EmbeddingSet, GroundTruth, Modality, NormStats, SyntheticSpec};
pub use error::{MsaeError, Result};
pub use sae::{ForwardTrace, Mode, SaeConfig, SaeGradients, SaeParams, Variant};
pub use train::{Checkpoint, TrainConfig, TrainState};
