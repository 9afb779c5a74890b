//! Efficient adaptive transformer encoder.
//!
//! A from-scratch encoder that combines progressive token pruning, windowed
//! attention with a global `[CLS]` token and confidence-gated early exits,
//! together with an analytic cost model and a benchmarking harness.

pub mod attention;
pub mod bench;
pub mod costmodel;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exits;
pub mod par;
pub mod pruning;
pub mod tensor;

pub use error::{EatError, Result};
