//! Sticker response selection with emotion- and intention-guided
//! multi-modal learning, built on a small float64 autodiff engine.

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
