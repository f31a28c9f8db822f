//! Self-supervised entity alignment between two knowledge graphs.
//!
//! Entities are encoded by a relation-aware graph attention network over
//! precomputed name/description embeddings and trained with momentum
//! contrastive learning plus an interactive loss built on mined
//! pseudo-aligned pairs. No gold alignment is used for training.

pub mod aggregator;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod kg;
pub mod miner;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
