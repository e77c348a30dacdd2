//! Synthetic image-classification datasets: context grammars and prompt
//! engineering, text-to-image generation through pluggable backends,
//! embedding-similarity filtering, and linear-probe training.

pub mod backend;
pub mod canonical;
pub mod error;
pub mod filter;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod split;
pub mod trainer;

pub use error::{Error, Result};
