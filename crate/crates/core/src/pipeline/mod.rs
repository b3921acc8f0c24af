//! End-to-end pipeline: configuration, dataset IO, stage orchestration,
//! synthetic worlds, firing-rate maps, and trajectory evaluation.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod ratemap;
pub mod run;
pub mod synth;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("odometry error: {0}")]
    Vo(String),
    #[error("evaluation error: {0}")]
    Evaluate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub use config::RunConfig;
pub use eval::{evaluate, Evaluation, TrajectoryStats};
pub use ratemap::{firing_rate_map, PhaseSample, RateMap, Unit};
pub use run::{run, RunInput, RunOutcome, RunRequest, RunStats};
pub use synth::{synthesize_world, SynthSpec};
