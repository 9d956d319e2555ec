//! Transitional-pattern distillation for session-based recommendation.
//!
//! Two compact encoder towers stand in for a knowledge model (item features
//! to summary embeddings) and a transfer model (meta-pair queries to summary
//! embeddings). Mutual-information bounds decouple and align the two, and the
//! distilled item embeddings feed a downstream next-item recommender.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mi;
pub mod nn;
pub mod pipeline;
pub mod recsys;
pub mod towers;
pub mod tpa;

pub use error::{Error, Result};
