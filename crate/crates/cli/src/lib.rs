//! Command implementations and run configuration for the `tristage` binary.

pub mod commands;
pub mod config;

pub use commands::{eval, generate, synth_data, tokenize, train, GenerateOptions, Layout};
pub use config::{LoadedConfig, RunConfig};
