//! Evaluation: per-episode metrics, baseline agents, the generalization
//! suites, embedding export, and run persistence.

mod agents;
mod embeddings;
mod evaluate;
mod suites;

pub use agents::{load_agent, Agent, GoalSeekAgent, NetAgent};
pub use embeddings::export_embeddings;
pub use evaluate::{evaluate, EvalOptions, EvalReport, EvalSummary};
pub use suites::{setting_by_id, suite_settings, run_suite, EnvOverrides, SuiteId, SuiteSetting};

use serde::{Deserialize, Serialize};

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    /// All goals reached in order within the horizon.
    pub success: bool,
    pub activation_count: usize,
    /// Seconds until the final goal activation, or the horizon on failure.
    pub nav_time: f64,
    /// Accumulated collision time in seconds.
    pub collision_time: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] crate::navenv::EnvError),
    #[error(transparent)]
    Tensor(#[from] crate::tensornet::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensornet::CheckpointError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}
