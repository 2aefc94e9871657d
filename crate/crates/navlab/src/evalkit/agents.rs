use super::EvalError;
use crate::config::RunConfig;
use crate::navenv::Observation;
use crate::policy::{ActionMode, InputMode, ObsBatch, PolicyNet, StudentNet};
use crate::tensornet::{load_checkpoint, MetaValue, ParamSet};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Anything that can drive an evaluation episode. Evaluation is
/// deterministic: agents see only the noisy observation and answer with a
/// mean action.
pub trait Agent: Sync {
    fn label(&self) -> &str;
    fn act(&self, obs: &Observation) -> [f64; 3];
}

enum Loaded {
    Policy(PolicyNet, ParamSet<f32>),
    Student(StudentNet, ParamSet<f32>),
}

/// A checkpointed network acting greedily on noisy observations.
pub struct NetAgent {
    label: String,
    loaded: Loaded,
    extent: (f64, f64),
    /// Variant recorded at training time (teacher / map_laser / pose_laser /
    /// student).
    pub variant: String,
}

impl Agent for NetAgent {
    fn label(&self) -> &str {
        &self.label
    }

    fn act(&self, obs: &Observation) -> [f64; 3] {
        let batch: ObsBatch<f32> = ObsBatch::from_observation(obs, self.extent);
        let out = match &self.loaded {
            Loaded::Policy(net, ps) => net
                .act::<f32, ChaCha8Rng>(ps, &batch, ActionMode::Mean, None)
                .expect("forward pass on valid observation"),
            Loaded::Student(net, ps) => net
                .act::<f32, ChaCha8Rng>(ps, &batch, ActionMode::Mean, None)
                .expect("forward pass on valid observation"),
        };
        out.env_actions[0]
    }
}

/// Resolve a run directory or checkpoint file into (checkpoint, config).
fn resolve(path: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let (ckpt, dir) = if path.is_dir() {
        (path.join("checkpoints").join("final.bin"), path.to_path_buf())
    } else {
        // checkpoint file: config sits next to it or one level up.
        let parent = path.parent().unwrap_or(Path::new("."));
        let dir = if parent.join("config.toml").exists() {
            parent.to_path_buf()
        } else {
            parent.parent().unwrap_or(Path::new(".")).to_path_buf()
        };
        (path.to_path_buf(), dir)
    };
    if !ckpt.exists() {
        return Err(EvalError::Invalid(format!(
            "checkpoint not found: {}",
            ckpt.display()
        )));
    }
    let config = dir.join("config.toml");
    if !config.exists() {
        return Err(EvalError::Invalid(format!(
            "run config not found next to checkpoint: {}",
            config.display()
        )));
    }
    Ok((ckpt, config))
}

/// Load an agent from a run directory (or explicit checkpoint path inside
/// one). The architecture fingerprint is verified against the snapshot
/// config.
pub fn load_agent(path: &Path, label: &str) -> Result<NetAgent, EvalError> {
    let (ckpt, config_path) = resolve(path)?;
    let cfg = RunConfig::load(&config_path).map_err(|e| EvalError::Config(e.to_string()))?;
    let extent = cfg.env.scene.extent;

    // Peek at the stored kind to decide the architecture.
    let (_, _, meta) = crate::tensornet::load_checkpoint_raw::<f32, _>(&ckpt)?;
    let kind = match meta.get("kind") {
        Some(MetaValue::Text(k)) => k.clone(),
        _ => "ppo_policy".to_string(),
    };
    let variant = match meta.get("variant") {
        Some(MetaValue::Text(v)) => v.clone(),
        _ => "student".to_string(),
    };

    let loaded = if kind == "student_policy" {
        let net = StudentNet::new(cfg.net.clone(), cfg.student.laser_fusion, cfg.env.speed_limit);
        let (params, _) = load_checkpoint::<f32, _>(&ckpt, &net.fingerprint())?;
        Loaded::Student(net, params)
    } else {
        let mode = match variant.as_str() {
            "pose_laser" => InputMode::PoseLaser,
            _ => InputMode::MapLaser,
        };
        let net = PolicyNet::new(cfg.net.clone(), mode, cfg.env.speed_limit);
        let (params, _) = load_checkpoint::<f32, _>(&ckpt, &net.fingerprint())?;
        Loaded::Policy(net, params)
    };
    Ok(NetAgent {
        label: label.to_string(),
        loaded,
        extent,
        variant,
    })
}

/// Scripted baseline: head for the active goal along the relative-goal
/// vector, with a simple repulsive nudge away from close laser returns.
/// Useful for metric oracles and smoke runs; no learning involved.
pub struct GoalSeekAgent {
    pub label: String,
    /// Commanded speed in m/s.
    pub speed: f64,
    /// Repulsion activation distance in meters (0 disables avoidance).
    pub avoid_distance: f64,
    pub goal_clip: f64,
    pub lidar_fov: f64,
    pub lidar_max_range: f64,
}

impl GoalSeekAgent {
    pub fn new(speed: f64, avoid_distance: f64) -> Self {
        GoalSeekAgent {
            label: "goal_seek".to_string(),
            speed,
            avoid_distance,
            goal_clip: 4.0,
            lidar_fov: 270f64.to_radians(),
            lidar_max_range: 5.0,
        }
    }
}

impl Agent for GoalSeekAgent {
    fn label(&self) -> &str {
        &self.label
    }

    fn act(&self, obs: &Observation) -> [f64; 3] {
        let gx = obs.goal_vec[0] as f64 * self.goal_clip;
        let gy = obs.goal_vec[1] as f64 * self.goal_clip;
        let norm = (gx * gx + gy * gy).sqrt();
        if norm < 1e-9 {
            return [0.0, 0.0, 0.0];
        }
        let mut vx = gx / norm;
        let mut vy = gy / norm;
        if self.avoid_distance > 0.0 {
            let n = obs.laser.len();
            for (k, r) in obs.laser.iter().enumerate() {
                let range = *r as f64 * self.lidar_max_range;
                if range >= self.avoid_distance {
                    continue;
                }
                let angle = if n == 1 {
                    0.0
                } else {
                    -self.lidar_fov / 2.0 + k as f64 * self.lidar_fov / (n as f64 - 1.0)
                };
                let push = (self.avoid_distance - range) / self.avoid_distance;
                vx -= push * angle.cos() * 0.8;
                vy -= push * angle.sin() * 0.8;
            }
            let vn = (vx * vx + vy * vy).sqrt().max(1e-9);
            vx /= vn;
            vy /= vn;
        }
        [vx * self.speed, vy * self.speed, 0.0]
    }
}
