//! Cross-view attention laboratory.
//!
//! A self-contained stack for studying how camera geometry couples video
//! distances to attention-map distances: a procedural two-camera scene
//! generator, a miniature video transformer with CLS-attention extraction,
//! the unpaired cross-view self-attention regularizer, and the oracles and
//! ablation harnesses that verify each piece.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
