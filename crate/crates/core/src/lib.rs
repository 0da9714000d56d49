//! Joint 2D grid classification and multi-root 3D pose regression with a
//! from-scratch CNN, plus a synthetic articulated-skeleton corpus to train
//! and evaluate it on.

pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
