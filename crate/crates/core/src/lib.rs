//! Deep global clustering for hyperspectral image cubes.
//!
//! A small hybrid 1D/2D convolutional encoder maps every pixel spectrum to a
//! unit-norm embedding; a bank of memorized centroids labels pixels by their
//! nearest center. Training sees only pairs of partially overlapping patches
//! from one cube at a time, so memory stays constant in the dataset size.

pub mod cli;
pub mod clustering;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod eval_diag;
pub mod losses;
pub mod pipeline;
pub mod real;
pub mod trainer;

pub use error::{Error, Result};
