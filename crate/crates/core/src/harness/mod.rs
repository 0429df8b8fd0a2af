//! Command-line phases: data generation, training, evaluation, probing and
//! ablation runs.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod probe;
pub mod train;
