//! One self-contained run configuration: environment, networks, PPO,
//! contrastive auxiliary, student distillation, and evaluation settings.
//! Snapshots of this struct live in every run directory, so checkpoints can
//! be reloaded without external context.

use crate::gridworld::Scene;
use crate::navenv::{EnvConfig, NoiseModel};
use crate::policy::NetSpec;
use crate::student::StudentConfig;
use crate::teacher::{AgentVariant, ContrastiveConfig, PpoConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Episodes per evaluation cell.
    pub episodes: usize,
    /// Test horizon in steps (60 s at dt = 0.04).
    pub horizon_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            horizon_steps: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; environment and optimization streams derive from it.
    pub seed: u64,
    pub variant: AgentVariant,
    /// Feed the teacher the clean laser instead of the noisy one.
    pub teacher_clean_laser: bool,
    pub env: EnvConfig,
    pub net: NetSpec,
    pub ppo: PpoConfig,
    pub contrastive: ContrastiveConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::full_scale()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl RunConfig {
    /// Full-scale defaults.
    pub fn full_scale() -> Self {
        RunConfig {
            version: 1,
            seed: 0,
            variant: AgentVariant::Teacher,
            teacher_clean_laser: false,
            env: EnvConfig::default(),
            net: NetSpec::default(),
            ppo: PpoConfig::default(),
            contrastive: ContrastiveConfig::default(),
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Reduced configuration for quick end-to-end runs: 4.0 x 3.0 m scene,
    /// 3 goals, 300-step episodes, 250k teacher / 150k student steps,
    /// 32-d/16-d features on a coarser grid.
    pub fn desk_scale() -> Self {
        let mut c = RunConfig::full_scale();
        c.env.scene = Scene::desk();
        c.env.resolution = 0.08;
        c.env.episode_steps = 300;
        // Training noise scaled with the scene (0.6x the full-scale bounds).
        c.env.noise = NoiseModel {
            shift_bound: 0.30,
            pose_bound: 0.06,
            laser_bound: 0.06,
            yaw_step_noise: true,
        };
        c.net = NetSpec::desk_scale();
        c.ppo.total_steps = 250_000;
        c.student.total_steps = 150_000;
        c.eval.episodes = 200;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(RunConfig::full_scale()),
            "desk" => Some(RunConfig::desk_scale()),
            _ => None,
        }
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let path_str = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| ConfigError::Io {
            path: path_str.clone(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path_str,
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ConfigError> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    /// Environment for training (training horizon).
    pub fn train_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.seed = self.seed;
        env
    }

    /// Environment for evaluation: test horizon, optionally overridden noise.
    pub fn eval_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.episode_steps = self.eval.horizon_steps;
        env
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_matches_published_hyperparameters() {
        let c = RunConfig::full_scale();
        // Teacher column.
        assert_eq!(c.ppo.n_envs, 4);
        assert_eq!(c.ppo.total_steps, 2_000_000);
        assert_eq!(c.ppo.gamma, 0.99);
        assert_eq!(c.ppo.gae_lambda, 0.95);
        assert_eq!(c.ppo.clip, 0.15);
        assert_eq!(c.ppo.nsteps, 256);
        assert_eq!(c.ppo.nepochs, 2);
        assert_eq!(c.ppo.nminibatch, 4);
        assert_eq!(c.ppo.lr0, 4e-4);
        // Student column.
        assert_eq!(c.student.n_envs, 2);
        assert_eq!(c.student.total_steps, 1_000_000);
        assert_eq!(c.student.nsteps, 256);
        assert_eq!(c.student.nepochs, 2);
        assert_eq!(c.student.nminibatch, 2);
        assert_eq!(c.student.lr0, 2e-4);
        // Loss weights.
        assert_eq!(c.contrastive.tau, 0.25);
        assert_eq!(c.contrastive.beta_t, 0.2);
        assert_eq!(c.student.alpha_fd, 0.25);
        assert_eq!(c.student.beta_pd, 0.75);
        // Environment.
        assert_eq!(c.env.dt, 0.04);
        assert_eq!(c.env.episode_steps, 500);
        assert_eq!(c.env.speed_limit, [2.0, 2.0, std::f64::consts::PI / 4.0]);
        assert_eq!(c.env.noise.shift_bound, 0.5);
        assert_eq!(c.env.noise.pose_bound, 0.1);
        assert_eq!(c.env.noise.laser_bound, 0.1);
        assert_eq!(c.env.lidar.n_rays, 60);
        assert_eq!(c.env.lidar.fov_degrees, 270.0);
        assert_eq!(c.env.scene.extent, (8.08, 4.48));
        assert_eq!(c.env.scene.goal_count, 5);
        assert_eq!(c.eval.horizon_steps, 1500);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::desk_scale();
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
    }
}
