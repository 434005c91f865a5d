// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod color;
pub mod config;
pub mod error;
pub mod external;
pub mod harness;
pub mod manifest;
pub mod normalize;
pub mod seed;
pub mod stain;
pub mod stats;
pub mod synth;
pub mod tiler;

pub use error::{Error, Result};
