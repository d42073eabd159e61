//! Desk-scale laboratory for ReLU-routed mixture-of-heads attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`tape`] / [`gradcheck`] — dense `f64` matrices, an eager
//!   reverse-mode autodiff tape, and finite-difference verification;
//! * [`attention`] — standard multi-head attention, the ReLU-routed
//!   mixture-of-heads layer, and a top-k gated baseline, plus per-head
//!   activation traces;
//! * [`objectives`] — the sparsity regulariser, its feedback-controlled
//!   coefficient, and the over-sparsity penalty;
//! * [`model`] — the toy personalized QA model: concept registries, masked
//!   query assembly, frame encoder, adapters, checkpoints;
//! * [`data`] — synthetic identity/clip/QA generation and the on-disk
//!   manifest format;
//! * [`train`] / [`metrics`] / [`ablation`] — the two-stage trainer,
//!   existence/BLEU evaluation, activation heatmaps, and the ablation grid.

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ablation;
pub mod gradcheck;
pub mod heatmap;
pub mod seed;
pub mod templates;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
