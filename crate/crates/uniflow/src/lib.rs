//! Desk-scale unified multimodal pipeline on a synthetic shape corpus.
//!
//! The pieces, bottom to top:
//!
//! * a dense [`Tensor`] type and a tape-based reverse-mode [`graph::Graph`],
//!   generic over the scalar type (`f64` for gradient checking, `f32` for
//!   training),
//! * a frozen random patch encoder standing in for a pretrained vision tower,
//! * a semantic compressor that maps the encoder's 64x144 feature grid down to
//!   a small latent (64x8 by default) plus the inverse decompressor,
//! * a flow-matching pixel decoder conditioned on those latents,
//! * two conditional latent-prediction pathways over a shared transformer
//!   trunk: mixed text/latent sequence training and learnable-query prompting
//!   of a frozen text backbone,
//! * an experiment harness that trains small models end to end and writes
//!   JSONL metrics, Markdown reports and CSV tables.
//!
//! Everything is deterministic given a seed: one stream of `ChaCha8` per
//! concern, fixed reduction orders, single-threaded execution.

pub mod checker;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod queries;
pub mod sampling;
pub mod scalar;
pub mod silhouette;
pub mod tensor;
pub mod toydata;
pub mod unified;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Tape for training runs.
pub type Graph32 = graph::Graph<f32>;
/// Tape for gradient-check runs.
pub type Graph64 = graph::Graph<f64>;
