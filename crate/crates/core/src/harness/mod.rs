//! Experiment plumbing: synthetic tasks, run configs, heatmap export and the CLI.

pub mod cli;
pub mod config;
pub mod heatmap;
pub mod synthetic;
