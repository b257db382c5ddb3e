//! Command-line pipelines: dataset generation, training, evaluation,
//! inference and sweeps, plus the checkpoint format and run config.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pipeline;
