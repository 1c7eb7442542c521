//! Sparse adapters for a small transformer classifier: saliency-scored
//! mask selection with periodic refresh, block-sparse and layer-drop
//! variants, and the merging methods used to combine per-task experts.

pub mod adapter_file;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod merging;
pub mod model;
pub mod numerics;
pub mod saliency;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, FormatError, Result};
