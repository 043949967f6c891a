//! Experiment harness for spectral adapters: synthetic data, pretraining,
//! tuning, evaluation, ablation sweeps and the self-check suite.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod selfcheck;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
