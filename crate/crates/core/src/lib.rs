//! Slow-fast video token compression.

pub mod error;
pub mod numeric;
pub mod synth;
pub mod pipeline;
pub mod compressors;
pub mod training;
pub mod bench;

pub use error::{Error, Result};
