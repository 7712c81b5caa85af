//! Command-line pipeline: configuration, stage orchestration and exit codes.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{parse_config, Mode, PartialConfig, PipelineConfig};
pub use error::{CliError, Stage};
pub use pipeline::{run_pipeline, ExitReport};
