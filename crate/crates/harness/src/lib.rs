//! Experiment harness: datasets, pretraining, configuration and the staged
//! attack/defense pipeline behind the `bitlock` command.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod report;
pub mod train;

pub use error::{HarnessError, Result};
