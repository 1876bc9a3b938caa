//! Convolutional classifiers for binary chest X-ray recognition, built and
//! trained from scratch in double precision.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use models::{ArchId, ArchitectureSpec, Model};
pub use tensor::{Shape4, Tensor};
