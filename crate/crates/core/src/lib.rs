//! A small laboratory for measuring how multimodal models behave when the
//! modalities seen at evaluation differ from those seen during downstream
//! training.
//!
//! The crate trains tiny per-modality encoders on synthetic aligned data,
//! sweeps every training-modality subset, scores every evaluation subset,
//! and turns the resulting score matrix into performance / robustness
//! summaries. Two interventions are provided: modality-augmented
//! self-distillation and weight-space interpolation of checkpoints.

pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
