//! Multimodal continuous valence-arousal recognition.
//!
//! A small reverse-mode autodiff engine drives two fusion models (LFAN and
//! CAN) over visual, audio and linguistic branches, trained with a CCC loss
//! under a warmup / plateau / progressive-unfreezing schedule with
//! subject-independent cross-validation.

pub mod autodiff;
mod binio;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod folds;
pub mod fsutil;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod params;
pub mod report;
pub mod seq_blocks;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
