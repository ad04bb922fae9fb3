//! Unified multimodal-to-language alignment at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: a reverse-mode autodiff tensor core, per-modality
//! tokenizers, a shared transformer encoder, the mixture-of-experts
//! universal projection module, a byte-level causal decoder, the
//! synthetic paired-data generator and the staged training pipeline.
//! File formats, configuration files and the command line live in the
//! `onellm` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
mod kernels;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod modality;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompts;
mod scalar;
pub mod tensor;
pub mod tokenizers;
pub mod upm;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use modality::ModalityId;
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
