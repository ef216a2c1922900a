//! EENED: a convolutional-transformer encoder for binary seizure detection
//! on single-channel EEG segments.
//!
//! The crate carries its own small reverse-mode autodiff ([`autodiff`]),
//! the encoder sub-modules ([`encoder`]), the assembled network
//! ([`model`]), data ingestion ([`data`]), training and evaluation
//! ([`train`], [`metrics`]) and a finite-difference gradient checker
//! ([`gradcheck`]).

pub mod autodiff;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{FormatError, Error, Result};
pub use model::{EenedModel, ModelConfig};
pub use parallel::Execution;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
