//! Generalized zero-label semantic segmentation with iterative self-training.
//!
//! A per-pixel backbone maps images into a word-embedding space; classes are
//! scored by inner products with their embeddings. After training on seen
//! classes, the model pseudo-labels unlabeled pixels with unseen classes,
//! keeps only labels that agree across invertible augmentations, and is
//! fine-tuned on both. The loop repeats with the fine-tuned model as the new
//! pseudo-label generator.

pub mod augmentation;
pub mod cli;
pub mod error;
pub mod image;
pub mod label_space;
pub mod metrics;
pub mod model;
pub mod pseudo_labeler;
pub mod self_training;
pub mod synthetic;

pub use error::{Error, Result};
pub use image::{FeatureGrid, Grid, Image};
pub use label_space::{BackgroundMode, ClassId, EmbeddingTable, LabelMask, LabelSpace, UNLABELED};
