//! Continual learning for a desk-scale dual-encoder contrastive model.
//!
//! Grouped elastic weight consolidation, cross-modal consistency against frozen
//! encoder snapshots and low-rank adapters, plus the sequential-task harness
//! and metric suite used to compare them with naive, replay, L2 and standard
//! EWC baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod params;
pub mod regularize;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
