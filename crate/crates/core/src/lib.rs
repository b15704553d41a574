//! Adversarial visual-concept unlearning on a toy multimodal recognizer:
//! autodiff core, synthetic benchmark, model, perturbation generator,
//! anchor sampling, unlearning methods and metrics.

pub mod advgen;
pub mod anchor;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod train;
pub mod unlearn;
pub mod vcubench;

pub use error::{Error, Result};
