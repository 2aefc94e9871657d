//! PPO training of the teacher on clean maps (noisy laser), with GAE
//! advantages and the contrastive auxiliary objective. The same machinery
//! trains the Pose+Laser and Map+Laser baselines on noisy inputs.

mod gae;
mod losses;
mod rollout;
mod trainer;

pub use gae::compute_gae;
pub use losses::{infonce_loss, ppo_loss, recompute_log_probs, Minibatch, PpoLossStats};
pub use rollout::{collect_rollouts, EpisodeStat, EpisodeTracker, ObsCompose, RolloutBuffer, Side, StoredObs};
pub use trainer::{teacher_update, train_teacher, TrainSummary, UpdateStats};
pub(crate) use trainer::new_csv;

use crate::policy::{AugmentConfig, InputMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub nsteps: usize,
    pub nepochs: usize,
    pub nminibatch: usize,
    pub n_envs: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.15,
            nsteps: 256,
            nepochs: 2,
            nminibatch: 4,
            n_envs: 4,
            total_steps: 2_000_000,
            lr0: 4e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub beta_t: f64,
    pub ema_momentum: f64,
    pub augment: AugmentConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.25,
            beta_t: 0.2,
            ema_momentum: 0.999,
            augment: AugmentConfig::default(),
        }
    }
}

/// Which PPO agent a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentVariant {
    /// Clean map + noisy laser, contrastive auxiliary on.
    Teacher,
    /// Noisy map + noisy laser, plain PPO.
    MapLaser,
    /// Noisy pose + noisy laser (no map), plain PPO.
    PoseLaser,
}

impl AgentVariant {
    pub fn input_mode(self) -> InputMode {
        match self {
            AgentVariant::PoseLaser => InputMode::PoseLaser,
            _ => InputMode::MapLaser,
        }
    }

    /// Observation composition during training.
    pub fn compose(self, teacher_clean_laser: bool) -> ObsCompose {
        match self {
            AgentVariant::Teacher => ObsCompose {
                map: Side::Clean,
                laser: if teacher_clean_laser { Side::Clean } else { Side::Noisy },
                goal: Side::Clean,
                pose: Side::Clean,
            },
            AgentVariant::MapLaser | AgentVariant::PoseLaser => ObsCompose::all_noisy(),
        }
    }

    /// Only the teacher uses the contrastive auxiliary by default.
    pub fn uses_contrastive(self) -> bool {
        self == AgentVariant::Teacher
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentVariant::Teacher => "teacher",
            AgentVariant::MapLaser => "map_laser",
            AgentVariant::PoseLaser => "pose_laser",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] crate::navenv::EnvError),
    #[error(transparent)]
    Tensor(#[from] crate::tensornet::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensornet::CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}
