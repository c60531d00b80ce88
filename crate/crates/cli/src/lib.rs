//! Command-line side of the bridge solvers: experiment configuration, CSV
//! artifacts, checkpoints and the subcommands that tie them to `dsb-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod render;
