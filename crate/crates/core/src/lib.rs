//! Slow-manifold computation by zero-derivative functional iterations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod derivatives;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod par;
pub mod projector;
pub mod rpm;
pub mod stability;
pub mod systems;
pub mod table;

pub use error::{Result, SlowError};
