//! Desk-scale self-supervised learning pipeline for stain images.
//!
//! The crate covers the full loop: procedural synthetic stain-slide corpus
//! with OTSU-based tiling, multi-crop augmentation, a small vision
//! transformer trained by self-distillation, and a downstream evaluation
//! harness (linear/MLP probes, multiple-instance learning, retrieval,
//! stratified cross-validation, significance tests).

pub mod augment;
pub mod config;
pub mod corpus;
pub mod dino;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
