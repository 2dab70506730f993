//! Bias-aware curation and cross-demographic evaluation of face verification
//! datasets.
//!
//! The pipeline is a chain of pure transformations over a [`records::Manifest`]
//! plus a shared read-only [`records::EmbeddingStore`]:
//!
//! * [`filters`] applies attribute gates (quality, pose, brightness, face area).
//! * [`consensus`] makes race and gender labels consistent per identity.
//! * [`denoise`] removes mislabeled images by density clustering of embeddings.
//! * [`evaluation`] builds genuine / impostor score distributions and the
//!   disparity metrics (d′, FMR, TPR).
//! * [`facearea`] measures segmentation masks and balances pairs by mask IoU.
//! * [`protocols`] holds the subsampling and benchmark assembly recipes.
//! * [`synthcohort`] generates ground-truth-known populations for testing.

pub mod cli;
pub mod consensus;
pub mod denoise;
pub mod error;
pub mod evaluation;
pub mod facearea;
pub mod filters;
pub mod protocols;
pub mod provenance;
pub mod records;
pub mod seeding;
pub mod synthcohort;

pub use error::{Error, Result};
