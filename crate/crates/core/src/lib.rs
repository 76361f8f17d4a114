//! Keyword-guided image captioning engine.
//!
//! A contextualized keyword encoder (masked self-attention blocks over the
//! keyword tokens) produces one keyword representation, which is concatenated
//! with an image feature vector and fed at every step of a recurrent caption
//! generator. Everything runs on a small `f64` reverse-mode autodiff
//! substrate; the crate also carries the training loop, a bit-exact
//! checkpoint format and the BLEU/CIDEr/ROUGE-L/METEOR metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result, TensorError};
pub use model::{CaptionModel, PreparedSample};
pub use tensor::{SeededRng, Tensor};
