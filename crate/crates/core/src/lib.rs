//! Incomplete triple-modal co-attention fusion for MCI conversion prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff engine, checkpoints, gradient checker
//! - [`synthdata`]: seeded synthetic cohorts, volume files, k-fold splits
//! - [`mmg`]: vector-quantized MRI→PET generator with its hybrid loss
//! - [`encoders`]: per-modality encoders and multi-head self-attention
//! - [`tcaf`]: triple-modal co-attention, cross-concatenation, classifier
//! - [`losses`]: focal, similarity-distribution-matching, combined objectives
//! - [`trainer`]: Adam, two-stage training, cross-validation driver
//! - [`metrics`]: ACC/SEN/SPE/F1 and Mann-Whitney AUC
//! - [`config`]: run configuration and its canonical hash
//! - [`verify`]: named property checks used by the `verify` command

pub mod config;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mmg;
pub mod nn;
pub mod synthdata;
pub mod tcaf;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
