//! x-vector speaker embeddings with statistics, attention and multi-head
//! attention pooling, plus training, scoring and EER/minDCF evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod pooling;
pub mod train;

pub use error::{Error, Result};
