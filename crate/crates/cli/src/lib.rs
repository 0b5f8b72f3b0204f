//! Stage-by-stage driver for clustered multi-teacher distillation runs.
//!
//! A run is described by one TOML file ([`config::RunConfig`]) and lives in
//! one directory; every stage ([`stages::Stage`]) reads the artifacts of
//! earlier stages from that directory and stamps its own with the config hash.

pub mod config;
pub mod error;
pub mod stages;

pub use config::{Arm, Overrides, RunConfig};
pub use error::CliError;
pub use stages::{Run, Stage};
