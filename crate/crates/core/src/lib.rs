//! Channel-shrinking KV cache compression for decoder-only transformers.

pub mod baselines;
pub mod bench;
pub mod bibranch;
pub mod calibrate;
pub mod error;
pub mod lowrank;
pub mod numerics;
pub mod quant;
pub mod tensorio;
pub mod transformer;

pub use error::{CskvError, Result};
