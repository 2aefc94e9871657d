use super::{compute_gae, PpoConfig, TrainError};
use crate::navenv::{Observation, VecEnv};
use crate::policy::{ActionMode, ObsBatch, PolicyNet, pose_to_input};
use crate::tensornet::{Elem, ParamSet};
use ndarray::{Array1, Array3};
use rand::Rng;

/// Which member of the paired observation a component is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Clean,
    Noisy,
}

/// Per-component observation composition. The teacher trains on the clean
/// map with the noisy laser; the baselines train fully noisy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsCompose {
    pub map: Side,
    pub laser: Side,
    pub goal: Side,
    pub pose: Side,
}

impl ObsCompose {
    pub fn all_noisy() -> Self {
        ObsCompose {
            map: Side::Noisy,
            laser: Side::Noisy,
            goal: Side::Noisy,
            pose: Side::Noisy,
        }
    }

    pub fn all_clean() -> Self {
        ObsCompose {
            map: Side::Clean,
            laser: Side::Clean,
            goal: Side::Clean,
            pose: Side::Clean,
        }
    }
}

/// One composed observation as stored in the rollout buffer.
#[derive(Debug, Clone)]
pub struct StoredObs {
    pub map: Array3<f32>,
    pub laser: Array1<f32>,
    pub goal: [f32; 2],
    pub pose: [f32; 3],
}

impl StoredObs {
    pub fn compose(
        noisy: &Observation,
        clean: &Observation,
        how: &ObsCompose,
        extent: (f64, f64),
    ) -> Self {
        let pick = |side: Side| match side {
            Side::Clean => clean,
            Side::Noisy => noisy,
        };
        StoredObs {
            map: pick(how.map).ego_map.values.clone(),
            laser: pick(how.laser).laser.clone(),
            goal: pick(how.goal).goal_vec,
            pose: pose_to_input(&pick(how.pose).pose_estimate, extent),
        }
    }
}

/// Fixed-size on-policy storage: `nsteps * n_envs` transitions, indexed
/// `t * n_envs + e`.
#[derive(Debug)]
pub struct RolloutBuffer {
    pub nsteps: usize,
    pub n_envs: usize,
    pub obs: Vec<StoredObs>,
    /// Pre-squash actions.
    pub actions: Vec<[f32; 3]>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub bootstrap: Vec<f32>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// GAE over each environment column.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<(), TrainError> {
        let (t, n) = (self.nsteps, self.n_envs);
        self.advantages = vec![0.0; t * n];
        self.returns = vec![0.0; t * n];
        for e in 0..n {
            let rewards: Vec<f64> = (0..t).map(|i| self.rewards[i * n + e] as f64).collect();
            let values: Vec<f64> = (0..t).map(|i| self.values[i * n + e] as f64).collect();
            let dones: Vec<bool> = (0..t).map(|i| self.dones[i * n + e]).collect();
            let (adv, ret) = compute_gae(
                &rewards,
                &values,
                &dones,
                self.bootstrap[e] as f64,
                gamma,
                lambda,
            )?;
            for i in 0..t {
                self.advantages[i * n + e] = adv[i] as f32;
                self.returns[i * n + e] = ret[i] as f32;
            }
        }
        Ok(())
    }

    /// Normalize advantages to mean 0 / std 1 (population). Returns the
    /// pre-normalization `(mean, std)`.
    pub fn normalize_advantages(&mut self) -> (f64, f64) {
        let n = self.advantages.len().max(1) as f64;
        let mean = self.advantages.iter().map(|&a| a as f64).sum::<f64>() / n;
        let var = self
            .advantages
            .iter()
            .map(|&a| (a as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let denom = std + 1e-8;
        for a in &mut self.advantages {
            *a = ((*a as f64 - mean) / denom) as f32;
        }
        (mean, std)
    }
}

/// Per-episode statistics accumulated during collection.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStat {
    pub total_reward: f64,
    pub activations: usize,
    pub success: bool,
    pub collision_steps: usize,
    pub length: usize,
}

/// Tracks episode aggregates across auto-resetting vector environments.
#[derive(Debug, Default)]
pub struct EpisodeTracker {
    running_reward: Vec<f64>,
    running_activations: Vec<usize>,
    running_collisions: Vec<usize>,
    running_length: Vec<usize>,
    pub completed: Vec<EpisodeStat>,
    goal_count: usize,
}

impl EpisodeTracker {
    pub fn new(n_envs: usize, goal_count: usize) -> Self {
        EpisodeTracker {
            running_reward: vec![0.0; n_envs],
            running_activations: vec![0; n_envs],
            running_collisions: vec![0; n_envs],
            running_length: vec![0; n_envs],
            completed: Vec::new(),
            goal_count,
        }
    }

    pub fn record(&mut self, env: usize, reward: f64, activated: bool, collided: bool, done: bool) {
        self.running_reward[env] += reward;
        self.running_length[env] += 1;
        if activated {
            self.running_activations[env] += 1;
        }
        if collided {
            self.running_collisions[env] += 1;
        }
        if done {
            self.completed.push(EpisodeStat {
                total_reward: self.running_reward[env],
                activations: self.running_activations[env],
                success: self.running_activations[env] == self.goal_count,
                collision_steps: self.running_collisions[env],
                length: self.running_length[env],
            });
            self.running_reward[env] = 0.0;
            self.running_activations[env] = 0;
            self.running_collisions[env] = 0;
            self.running_length[env] = 0;
        }
    }
}

/// Roll `nsteps` transitions in every environment with the sampled policy.
/// Observations entering the buffer are composed per `how`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<E: Elem, R: Rng>(
    venv: &mut VecEnv,
    net: &PolicyNet,
    params: &ParamSet<E>,
    cfg: &PpoConfig,
    how: &ObsCompose,
    rng: &mut R,
    tracker: &mut EpisodeTracker,
) -> Result<RolloutBuffer, TrainError> {
    let n_envs = venv.len();
    let extent = venv.envs()[0].config().scene.extent;
    let nsteps = cfg.nsteps;
    let total = nsteps * n_envs;
    let mut buffer = RolloutBuffer {
        nsteps,
        n_envs,
        obs: Vec::with_capacity(total),
        actions: Vec::with_capacity(total),
        log_probs: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        bootstrap: vec![0.0; n_envs],
        advantages: Vec::new(),
        returns: Vec::new(),
    };

    let mut current: Vec<StoredObs> = venv
        .observe_all()
        .iter()
        .map(|(noisy, clean)| StoredObs::compose(noisy, clean, how, extent))
        .collect();

    for _ in 0..nsteps {
        let batch = batch_from_stored(&current, net);
        let act = net.act(params, &batch, ActionMode::Sample, Some(rng))?;
        let steps = venv.step_all(&act.env_actions)?;
        for (e, s) in steps.iter().enumerate() {
            buffer.obs.push(current[e].clone());
            buffer.actions.push([
                act.pre_squash[(e, 0)].as_f64() as f32,
                act.pre_squash[(e, 1)].as_f64() as f32,
                act.pre_squash[(e, 2)].as_f64() as f32,
            ]);
            buffer.log_probs.push(act.log_probs[e].as_f64() as f32);
            buffer.values.push(act.values[e].as_f64() as f32);
            buffer.rewards.push(s.result.reward as f32);
            buffer.dones.push(s.result.done);
            tracker.record(
                e,
                s.result.reward,
                s.result.info.goal_activated,
                s.result.info.collision,
                s.result.done,
            );
            let (noisy, clean) = s.next_obs();
            current[e] = StoredObs::compose(noisy, clean, how, extent);
        }
    }

    // Bootstrap values for unfinished episodes.
    let batch = batch_from_stored(&current, net);
    let boot = net.act::<E, R>(params, &batch, ActionMode::Mean, None)?;
    for e in 0..n_envs {
        buffer.bootstrap[e] = boot.values[e].as_f64() as f32;
    }
    Ok(buffer)
}

/// Assemble a network batch from stored observations (all of them).
pub fn batch_from_stored<E: Elem>(obs: &[StoredObs], net: &PolicyNet) -> ObsBatch<E> {
    gather_batch(obs, &(0..obs.len()).collect::<Vec<_>>(), net.mode == crate::policy::InputMode::MapLaser)
}

/// Assemble a network batch from selected indices.
pub fn gather_batch<E: Elem>(obs: &[StoredObs], idx: &[usize], with_maps: bool) -> ObsBatch<E> {
    let maps: Option<Vec<&Array3<f32>>> = if with_maps {
        Some(idx.iter().map(|&i| &obs[i].map).collect())
    } else {
        None
    };
    let lasers: Vec<&Array1<f32>> = idx.iter().map(|&i| &obs[i].laser).collect();
    let goals: Vec<[f32; 2]> = idx.iter().map(|&i| obs[i].goal).collect();
    let poses: Vec<[f32; 3]> = idx.iter().map(|&i| obs[i].pose).collect();
    ObsBatch::build(maps.as_deref(), &lasers, &goals, &poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Scene;
    use crate::navenv::{make_vec, EnvConfig, NoiseModel};
    use crate::policy::{InputMode, NetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (VecEnv, PolicyNet, ParamSet<f32>) {
        let env_cfg = EnvConfig {
            scene: Scene::desk(),
            resolution: 0.08,
            episode_steps: 30,
            noise: NoiseModel::default(),
            seed: 7,
            ..EnvConfig::default()
        };
        let venv = make_vec(&env_cfg, 2).unwrap();
        let spec = NetSpec {
            map_size: 32,
            conv_channels: [4, 6, 6],
            feat_map: 8,
            laser_hidden: 16,
            feat_laser: 6,
            head_hidden: 16,
            transform_hidden: 16,
            ..NetSpec::default()
        };
        let net = PolicyNet::new(spec, InputMode::MapLaser, [2.0, 2.0, 0.785]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params::<f32, _>(&mut rng);
        (venv, net, params)
    }

    #[test]
    fn buffer_has_expected_size_and_determinism() {
        let cfg = PpoConfig {
            nsteps: 16,
            n_envs: 2,
            ..PpoConfig::default()
        };
        let (mut venv, net, params) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tracker = EpisodeTracker::new(2, 3);
        let buf = collect_rollouts(
            &mut venv,
            &net,
            &params,
            &cfg,
            &ObsCompose::all_noisy(),
            &mut rng,
            &mut tracker,
        )
        .unwrap();
        assert_eq!(buf.len(), 32);
        assert_eq!(buf.actions.len(), 32);
        assert_eq!(buf.bootstrap.len(), 2);

        // Same seeds -> identical buffers.
        let (mut venv2, net2, params2) = tiny_setup();
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut tracker2 = EpisodeTracker::new(2, 3);
        let buf2 = collect_rollouts(
            &mut venv2,
            &net2,
            &params2,
            &cfg,
            &ObsCompose::all_noisy(),
            &mut rng2,
            &mut tracker2,
        )
        .unwrap();
        assert_eq!(buf.rewards, buf2.rewards);
        assert_eq!(buf.log_probs, buf2.log_probs);
        assert_eq!(buf.actions, buf2.actions);
    }

    #[test]
    fn teacher_compose_uses_clean_map_noisy_laser() {
        let env_cfg = EnvConfig {
            scene: Scene::desk(),
            resolution: 0.08,
            episode_steps: 30,
            noise: NoiseModel {
                shift_bound: 0.4,
                pose_bound: 0.1,
                laser_bound: 0.1,
                yaw_step_noise: true,
            },
            seed: 11,
            ..EnvConfig::default()
        };
        let env = crate::navenv::NavEnv::new(env_cfg.clone()).unwrap();
        let noisy = env.observe(false);
        let clean = env.observe(true);
        let how = super::super::AgentVariant::Teacher.compose(false);
        let stored = StoredObs::compose(&noisy, &clean, &how, env_cfg.scene.extent);
        assert_eq!(stored.map, clean.ego_map.values);
        assert_eq!(stored.laser, noisy.laser);
        assert_eq!(stored.goal, clean.goal_vec);
    }

    #[test]
    fn advantage_normalization_is_tight() {
        let mut buf = RolloutBuffer {
            nsteps: 8,
            n_envs: 2,
            obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: vec![0.0; 16],
            rewards: (0..16).map(|i| i as f32 * 0.3 - 2.0).collect(),
            dones: vec![false; 16],
            bootstrap: vec![0.5, -0.5],
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        buf.compute_advantages(0.99, 0.95).unwrap();
        buf.normalize_advantages();
        let n = buf.advantages.len() as f64;
        let mean = buf.advantages.iter().map(|&a| a as f64).sum::<f64>() / n;
        let std =
            (buf.advantages.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }
}
