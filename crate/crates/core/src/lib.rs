//! Toolkit for recycling low-rank adapters through adaptive merging.
//!
//! The numeric core ([`tensor`], [`merge`]) is generic over [`Scalar`]; the
//! adapter store, toy transformer, tuners and harness run in `f64`.

pub mod adapter;
pub mod error;
pub mod harness;
pub mod merge;
pub mod scalar;
pub mod selection;
pub mod tensor;
pub mod toylab;
pub mod tuner;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision matrix, the default currency of the toolkit.
pub type Mat = tensor::Matrix<f64>;
/// Single-precision matrix.
pub type Mat32 = tensor::Matrix<f32>;
