//! Sparse-view neural radiance fields with hierarchical geometric guidance
//! (prior-anchored sampling windows), hierarchical semantic guidance
//! (coarse-to-fine grid feature consistency) and synthetic scenes with exact
//! ground truth.
//!
//! The `examples/` directory walks through each piece; the `hg3` binary wraps
//! dataset generation, training, rendering, evaluation and ablations.

pub mod cli;
pub mod evalio;
pub mod field;
pub mod geometry;
pub mod rendering;
pub mod sampling;
pub mod scenes;
pub mod semantics;
pub mod training;

pub use diffcore;
