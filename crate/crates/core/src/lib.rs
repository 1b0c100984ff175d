//! Weakly supervised temporal grounding over frame-embedding sequences.
//!
//! A lightweight grounder learns K Gaussian temporal masks over a video's
//! frame embeddings, supervised by pseudo-labeled keyframes (cosine
//! similarity between an event-description embedding and each frame), a
//! description-moment contrastive objective, and a downstream answer loss.
//! Question-critical frames are selected with a smoothed, differentiable
//! Top-K during training and a fully discrete Top-K at inference.
//!
//! The crate ships its own tensor math with reverse-mode differentiation,
//! a bit-exact binary tensor format, a synthetic benchmark with planted
//! keyframes, and a training/evaluation CLI.

pub mod dataio;
pub mod error;
pub mod grounder;
pub mod numerics;
pub mod objectives;
pub mod pseudolabel;
pub mod selection;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
