//! Compiles and runs the Rust listings of the book in `book/src` as doc tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/numerics.md")]
pub mod numerics {}
#[doc = include_str!("../../../book/src/chunked-attention.md")]
pub mod chunked_attention {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/footprint.md")]
pub mod footprint {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
