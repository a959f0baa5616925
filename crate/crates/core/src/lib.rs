//! Multi-view graph convolutional recommender for items with multimodal content.
//!
//! Item modality features are denoised by a gate driven by ID embeddings,
//! propagated over per-modality KNN item graphs, fused with attention weights
//! derived from propagated behavior embeddings, and trained with BPR plus an
//! InfoNCE alignment term. Evaluation follows the all-ranking protocol.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod dense;
pub mod error;
pub mod eval;
pub mod model;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
