//! Prototypical memory attention at desk scale.
//!
//! Transformer self-attention layers that attend over prototype key/value
//! vectors distilled from banks of the network's own past training
//! activations, together with the training loop, synthetic dataset, and
//! verification harness around the mechanism.
//!
//! Module map:
//! - [`numerics`]: tensors and the reverse-mode tape everything runs on
//! - [`attention`]: scaled dot-product and multi-head attention with
//!   optional memory augmentation and segment embeddings
//! - [`membank`]: bounded per-layer/per-head streams of past activations
//!   with the strided sliding-window refresh schedule
//! - [`prototypes`]: K-Means key prototypes and exp(-L2)-weighted value
//!   interpolation over bank snapshots
//! - [`captioner`]: the encoder-decoder model whose decoder self-attention
//!   carries the memory
//! - [`trainkit`]: synthetic compositional dataset, training loop,
//!   checkpointing, evaluation
//! - [`analysis`]: softmax perturbation-bound verifier, attention
//!   diagnostics, ablation grid, attention-cost benchmarks

pub mod error;
pub mod rng;

pub mod analysis;
pub mod attention;
pub mod captioner;
pub mod membank;
pub mod numerics;
pub mod pool;
pub mod prototypes;
pub mod trainkit;

pub use error::{Error, Result};
