//! The navigation POMDP: kinematics, ordered goals, dense reward, noise
//! injection, paired clean/noisy observations, and a vectorized stepper.

mod env;
mod vec_env;

pub use env::{NavEnv, Observation, RewardBreakdown, RobotState, StepInfo, StepResult};
pub use vec_env::{make_vec, VecEnv, VecStep};

use crate::gridworld::{Scene, SceneError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Constant per-step penalty.
pub const REWARD_STEP: f64 = -0.01;
/// Penalty applied on steps whose motion was rejected by a collision.
pub const REWARD_COLLISION: f64 = -0.05;
/// Bonus granted when the active goal is reached.
pub const REWARD_GOAL: f64 = 4.0;

/// Uniform noise bounds. Bounds of zero reproduce the clean environment
/// exactly (the same random draws are made either way, scaled by the bound).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Episodic shift bound `s`: one draw from `U(-s, s)` per component
    /// (x, y, yaw) at reset, held for the whole episode.
    pub shift_bound: f64,
    /// Per-step pose-estimate noise bound, applied per component.
    pub pose_bound: f64,
    /// Per-step laser noise bound, in normalized range units per ray.
    pub laser_bound: f64,
    /// Whether the per-step pose noise also perturbs yaw.
    pub yaw_step_noise: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            shift_bound: 0.5,
            pose_bound: 0.1,
            laser_bound: 0.1,
            yaw_step_noise: true,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        NoiseModel {
            shift_bound: 0.0,
            pose_bound: 0.0,
            laser_bound: 0.0,
            yaw_step_noise: true,
        }
    }

    pub fn scaled(shift: f64, step: f64) -> Self {
        NoiseModel {
            shift_bound: shift,
            pose_bound: step,
            laser_bound: step,
            yaw_step_noise: true,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.shift_bound < 0.0 || self.pose_bound < 0.0 || self.laser_bound < 0.0 {
            return Err(EnvError::BadConfig("noise bounds must be >= 0".into()));
        }
        Ok(())
    }
}

/// Lidar geometry: rays span `fov` centered on the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub n_rays: usize,
    pub fov_degrees: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            n_rays: 60,
            fov_degrees: 270.0,
            max_range: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Control interval in seconds (500 training steps ~ 20 s).
    pub dt: f64,
    /// Episode horizon in steps (train 500, test 1500).
    pub episode_steps: usize,
    /// Per-component action bounds: (vx m/s, vy m/s, omega rad/s).
    pub speed_limit: [f64; 3],
    /// Goal activation radius in meters.
    pub goal_radius: f64,
    pub scene: Scene,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Grid resolution in meters per cell.
    pub resolution: f64,
    /// Egocentric window side in meters.
    pub window_extent: f64,
    pub robot_radius: f64,
    pub lidar: LidarConfig,
    /// Relative-goal clip (meters) before scaling into [-1, 1].
    pub goal_clip: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.04,
            episode_steps: 500,
            speed_limit: [2.0, 2.0, PI / 4.0],
            goal_radius: 0.30,
            scene: Scene::training(),
            noise: NoiseModel::default(),
            seed: 0,
            resolution: 0.04,
            window_extent: 2.56,
            robot_radius: 0.18,
            lidar: LidarConfig::default(),
            goal_clip: 4.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > 0.0) {
            return Err(EnvError::BadConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.episode_steps == 0 {
            return Err(EnvError::BadConfig("episode_steps must be >= 1".into()));
        }
        if self.speed_limit.iter().any(|&v| !(v > 0.0)) {
            return Err(EnvError::BadConfig("speed limits must be > 0".into()));
        }
        if !(self.goal_radius > 0.0) || !(self.robot_radius > 0.0) {
            return Err(EnvError::BadConfig("radii must be > 0".into()));
        }
        if !(self.resolution > 0.0) || !(self.window_extent > 0.0) {
            return Err(EnvError::BadConfig("resolution and window must be > 0".into()));
        }
        self.noise.validate()?;
        self.scene.validate().map_err(EnvError::Scene)?;
        Ok(())
    }

    /// Egocentric map side length in cells.
    pub fn ego_side(&self) -> usize {
        (self.window_extent / self.resolution).round().max(1.0) as usize
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
    #[error("failed to sample a collision-free layout after {0} attempts (scene too cluttered)")]
    SpawnSamplingFailed(usize),
    #[error("step() called on a finished episode; call reset() first")]
    EpisodeDone,
    #[error("step_all() got {got} actions for {expected} environments")]
    ActionCountMismatch { got: usize, expected: usize },
    #[error("make_vec needs at least one environment")]
    NoEnvs,
}

/// SplitMix64, used to derive independent seeds for sub-streams.
pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
