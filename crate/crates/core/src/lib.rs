//! Self-supervised image-complexity representation learning.
//!
//! Two views of every image are built by shifted patchify (per-patch
//! augmentation followed by a random directional shift inside each patch
//! window). A masked query ViT and a momentum key ViT are trained with a
//! patch-wise InfoNCE loss, while a small decoder predicts the Shannon
//! entropy of the masked patches. Representations are evaluated by a linear
//! probe reporting Pearson and Spearman correlation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patchify;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
