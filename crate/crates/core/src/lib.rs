//! Multi-task face analysis: a task-token transformer decoder over a toy
//! convolutional encoder, trained jointly on synthetic faces.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod profile;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
