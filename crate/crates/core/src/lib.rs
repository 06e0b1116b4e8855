//! Layer-wise mixed-precision quantization of a small decoder-only
//! transformer, driven by per-layer importance scores.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod importance;
pub mod model;
pub mod planner;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
