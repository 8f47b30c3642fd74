//! Multi-stage chunked transformer encoder for long-sequence classification.

pub mod attention;
pub mod bench;
pub mod chunkformer;
pub mod config;
pub mod embedding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod run;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
