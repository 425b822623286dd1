//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitives as they are evaluated; [`Graph::backward`]
//! then accumulates exact adjoints into parameter leaves. [`Adam`] and
//! [`lr_at`] cover optimization, and [`checkpoint`] persists named
//! parameter blocks.

pub mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use graph::{ordered_sum, sigmoid, softplus, Graph, Var};
pub use optim::{lr_at, Adam, AdamConfig};
pub use params::{accumulate_grads, zero_grads, ParamBlock, ParamSet};
pub use tensor::{ShapeError, Tensor};
