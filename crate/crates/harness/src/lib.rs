//! Experiment orchestration for the factorized video generator: configuration,
//! run manifests, the shared sampling engine, the studies and the CLI commands.

pub mod commands;
pub mod config;
pub mod engine;
pub mod manifest;
pub mod studies;
