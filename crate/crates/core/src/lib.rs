//! BHiVAE: blocked hierarchical variational autoencoders with a
//! disentanglement metric suite and desk-scale datasets.
//!
//! The crate is organized bottom-up:
//! - [`ndgrad`]: dense f64 arrays plus a flat-tape reverse-mode autodiff graph;
//! - [`nn`]: dense layers, MLPs, classifier losses;
//! - [`model`]: the hierarchical block architecture (encoder splits, part
//!   decoders, traversal editing);
//! - [`objectives`]: supervised and unsupervised loss terms, block prior;
//! - [`metrics`]: Z-diff, SAP, MIG and block-level variants;
//! - [`data`]: procedural mini-dSprites, IDX files, deterministic batching;
//! - training/eval drivers and the CLI surface (`config`, `checkpoint`,
//!   `train`, `report`, `traversal`, `ablation`).

pub mod error;
pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
mod linalg;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod train;
pub mod traversal;

pub use error::{Error, Result};
