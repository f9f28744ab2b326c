//! A Transformer encoder in which every feed-forward block can be swapped for
//! a light recurrent block built around a Swish pooling scan.
//!
//! The crate is self-contained: it carries its own dense tensor math with
//! reverse-mode gradients ([`numerics`]), the encoder building blocks
//! ([`layers`]), the three encoder variants ([`model`]), masked-LM pretraining
//! ([`training`]), a small byte-pair tokenizer and batcher ([`data`]), and the
//! throughput benchmark and gradient-check harness used by the CLI.

pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

pub use model::{EncoderModel, ModelConfig, Variant};
pub use numerics::{Scalar, Tape, Tensor, Var};
