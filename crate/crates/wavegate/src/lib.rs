//! Character-level transformer laboratory built around two attention
//! mechanisms: an energy gate on value aggregation and a Gaussian-windowed
//! wavelet positional encoding, plus the ablation harness and spectral
//! diagnostics used to study them.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff graph, compute kernels
//! - [`rng`]: the seedable PRNG every stochastic component draws from
//! - [`optim`]: AdamW, cosine schedule, gradient clipping
//! - [`pe`]: positional encodings (learned / sin-cos / rotary / Morlet)
//! - [`attention`]: attention variants and gates
//! - [`model`]: GPT-style decoder, tokenizer, checkpoints
//! - [`spectral`]: Morlet CWT, cascade profile, gate diagnostics
//! - [`train`]: deterministic training loop and ablation runner
//! - [`data`]: corpus loading, verification, and the synthetic fallback corpus
//! - [`report`]: CSV/SVG/JSON artifact writers
//! - [`gradcheck`]: finite-difference oracle used by the verification suite

pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pe;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
