//! Bi-space multimodal fusion segmentation with a cross-modal knowledge
//! learner, built on a small double-precision autodiff engine.

pub mod ablate;
pub mod autodiff;
pub mod bfser;
pub mod checkpoint;
pub mod ckler;
pub mod config;
pub mod cssm;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scan2d;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
