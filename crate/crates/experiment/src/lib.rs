//! Experiment orchestration for shortcut distillation of flow-matching
//! teachers: TOML recipes, binary checkpoints, metric logs, SVG plots and
//! the in-process steps behind the `scfm` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod records;

pub use config::{parse_config, ExperimentConfig};
pub use error::{ExperimentError, Result};
