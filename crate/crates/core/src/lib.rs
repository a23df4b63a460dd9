//! Knowledge integration for small transformer encoders: entity
//! descriptions and graph embeddings fed to the encoder, fine-tuning, and
//! analysis of what the trained layers carry.
//!
//! A guide with runnable examples lives in `book/`.

pub mod assemble;
pub mod diffmask;
pub mod encoder;
pub mod error;
pub mod kstore;
pub mod numcore;
pub mod plot;
pub mod probes;
pub mod rng;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};

/// Guide chapters, compiled as doc-tests so the examples stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/inputs.md")]
    struct Inputs;
    #[doc = include_str!("../../../book/src/assembly.md")]
    struct Assembly;
    #[doc = include_str!("../../../book/src/encoder.md")]
    struct Encoder;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/analysis.md")]
    struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
