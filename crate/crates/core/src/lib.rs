//! Compressing memory-access-prediction models with pattern-clustered
//! multi-teacher knowledge distillation.
//!
//! The pipeline clusters a memory trace into access-pattern partitions
//! ([`cluster`]), turns it into segmented-address inputs and delta-bitmap
//! labels ([`dataset`]), trains one large teacher per partition and distills
//! them into a single small student ([`models`], [`distill`]), and scores
//! every arm with micro-averaged multi-label metrics ([`metrics`]).

pub mod cluster;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod trace;

pub use error::{Error, Result};
