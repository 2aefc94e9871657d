use super::encoders::{
    actor_head, critic_head, init_laser_encoder, init_linear, init_map_encoder, laser_encoder,
    map_encoder, transform_module,
};
use super::NetSpec;
use crate::gridworld::Pose;
use crate::navenv::Observation;
use crate::tensornet::{zeros, Elem, Graph, ParamSet, Tensor, TensorError};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which observation components feed the actor-critic state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// state = concat(z, q, goal_vec)
    MapLaser,
    /// state = concat(q, normalized pose estimate, goal_vec)
    PoseLaser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

/// Batched network inputs, converted to the training element type.
#[derive(Debug, Clone)]
pub struct ObsBatch<E: Elem> {
    pub maps: Option<Array4<E>>,
    pub lasers: Array2<E>,
    pub goals: Array2<E>,
    pub poses: Array2<E>,
}

/// Normalize a pose estimate into roughly `[-1, 1]` per component.
pub fn pose_to_input(pose: &Pose, extent: (f64, f64)) -> [f32; 3] {
    [
        (pose.x / extent.0 * 2.0 - 1.0) as f32,
        (pose.y / extent.1 * 2.0 - 1.0) as f32,
        (pose.yaw / std::f64::consts::PI) as f32,
    ]
}

impl<E: Elem> ObsBatch<E> {
    pub fn len(&self) -> usize {
        self.lasers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assemble from per-sample parts. `maps` may be `None` for agents that
    /// never look at the egocentric map.
    pub fn build(
        maps: Option<&[&Array3<f32>]>,
        lasers: &[&Array1<f32>],
        goals: &[[f32; 2]],
        poses: &[[f32; 3]],
    ) -> Self {
        let n = lasers.len();
        assert_eq!(goals.len(), n);
        assert_eq!(poses.len(), n);
        let maps = maps.map(|ms| {
            assert_eq!(ms.len(), n);
            let (c, h, w) = ms[0].dim();
            let mut out = Array4::<E>::zeros((n, c, h, w));
            for (i, m) in ms.iter().enumerate() {
                for ((ch, y, x), v) in m.indexed_iter() {
                    out[(i, ch, y, x)] = E::from_f64(*v as f64);
                }
            }
            out
        });
        let laser_dim = lasers[0].len();
        let mut la = Array2::<E>::zeros((n, laser_dim));
        let mut go = Array2::<E>::zeros((n, 2));
        let mut po = Array2::<E>::zeros((n, 3));
        for i in 0..n {
            for (j, v) in lasers[i].iter().enumerate() {
                la[(i, j)] = E::from_f64(*v as f64);
            }
            for j in 0..2 {
                go[(i, j)] = E::from_f64(goals[i][j] as f64);
            }
            for j in 0..3 {
                po[(i, j)] = E::from_f64(poses[i][j] as f64);
            }
        }
        ObsBatch {
            maps,
            lasers: la,
            goals: go,
            poses: po,
        }
    }

    /// Single noisy/clean observation as a batch of one.
    pub fn from_observation(obs: &Observation, extent: (f64, f64)) -> Self {
        ObsBatch::build(
            Some(&[&obs.ego_map.values]),
            &[&obs.laser],
            &[obs.goal_vec],
            &[pose_to_input(&obs.pose_estimate, extent)],
        )
    }
}

/// Everything a PPO update needs from one forward pass.
pub struct PolicyForward<'g, E: Elem> {
    pub z: Option<Tensor<'g, E>>,
    pub q: Tensor<'g, E>,
    pub mu: Tensor<'g, E>,
    pub value: Tensor<'g, E>,
    pub log_std: Tensor<'g, E>,
}

/// Actions and bookkeeping from an inference pass.
#[derive(Debug, Clone)]
pub struct ActOutput<E: Elem> {
    /// Squashed, speed-scaled actions ready for the environment.
    pub env_actions: Vec<[f64; 3]>,
    /// Pre-squash Gaussian samples (or means), needed to recompute
    /// log-probabilities during optimization.
    pub pre_squash: Array2<E>,
    pub log_probs: Array1<E>,
    pub values: Array1<E>,
}

/// Actor-critic over encoded observations; covers the teacher and both RL
/// baselines via [`InputMode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub spec: NetSpec,
    pub mode: InputMode,
    pub action_scale: [f64; 3],
}

impl PolicyNet {
    pub fn new(spec: NetSpec, mode: InputMode, action_scale: [f64; 3]) -> Self {
        PolicyNet {
            spec,
            mode,
            action_scale,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.mode {
            InputMode::MapLaser => "policy_map_laser",
            InputMode::PoseLaser => "policy_pose_laser",
        }
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint(self.kind())
    }

    pub fn state_dim(&self) -> usize {
        match self.mode {
            InputMode::MapLaser => self.spec.feat_map + self.spec.feat_laser + self.spec.goal_dim,
            InputMode::PoseLaser => self.spec.feat_laser + 3 + self.spec.goal_dim,
        }
    }

    pub fn init_params<E: Elem, R: Rng>(&self, rng: &mut R) -> ParamSet<E> {
        let mut ps = ParamSet::new();
        let spec = &self.spec;
        if self.mode == InputMode::MapLaser {
            init_map_encoder(&mut ps, spec, "map", rng).expect("fresh set");
        }
        init_laser_encoder(&mut ps, spec, "laser", rng).expect("fresh set");
        let sd = self.state_dim();
        init_linear(&mut ps, "actor.fc1", sd, spec.head_hidden, rng).expect("fresh set");
        init_linear(&mut ps, "actor.mu", spec.head_hidden, spec.action_dim, rng)
            .expect("fresh set");
        init_linear(&mut ps, "critic.fc1", sd, spec.head_hidden, rng).expect("fresh set");
        init_linear(&mut ps, "critic.v", spec.head_hidden, 1, rng).expect("fresh set");
        ps.add("log_std", zeros(&[spec.action_dim])).expect("fresh set");
        ps
    }

    /// Map feature `z` alone (contrastive queries, embedding export).
    pub fn encode_map<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamSet<E>,
        maps: &Array4<E>,
        tracked: bool,
    ) -> Result<Tensor<'g, E>, TensorError> {
        let x = g.constant(maps.clone().into_dyn());
        map_encoder(g, ps, &self.spec, "map", x, tracked)
    }

    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamSet<E>,
        batch: &ObsBatch<E>,
        tracked: bool,
    ) -> Result<PolicyForward<'g, E>, TensorError> {
        let q = laser_encoder(g, ps, "laser", g.constant(batch.lasers.clone().into_dyn()), tracked)?;
        let goal = g.constant(batch.goals.clone().into_dyn());
        let (z, state) = match self.mode {
            InputMode::MapLaser => {
                let maps = batch.maps.as_ref().ok_or_else(|| {
                    TensorError::Invalid("map_laser policy needs egocentric maps".into())
                })?;
                let z = self.encode_map(g, ps, maps, tracked)?;
                (Some(z), Tensor::concat_cols(&[z, q, goal])?)
            }
            InputMode::PoseLaser => {
                let pose = g.constant(batch.poses.clone().into_dyn());
                (None, Tensor::concat_cols(&[q, pose, goal])?)
            }
        };
        let mu = actor_head(g, ps, "actor", state, tracked)?;
        let value = critic_head(g, ps, "critic", state, tracked)?;
        let log_std = if tracked {
            g.param(ps, "log_std")?
        } else {
            g.frozen_param(ps, "log_std")?
        };
        Ok(PolicyForward {
            z,
            q,
            mu,
            value,
            log_std,
        })
    }

    /// Inference: no gradients, optional sampling.
    pub fn act<E: Elem, R: Rng>(
        &self,
        ps: &ParamSet<E>,
        batch: &ObsBatch<E>,
        mode: ActionMode,
        rng: Option<&mut R>,
    ) -> Result<ActOutput<E>, TensorError> {
        let g = Graph::<E>::new();
        let fwd = self.forward(&g, ps, batch, false)?;
        let mu = fwd
            .mu
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mu is 2-d");
        let log_std = fwd
            .log_std
            .value()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("log_std is 1-d");
        let values = fwd
            .value
            .value()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("value is 1-d");
        finish_act(&g, mu, log_std, values, self.action_scale, mode, rng)
    }
}

/// The distilled agent: fresh encoders, a fusion transform aligning the map
/// feature with the teacher's, and an actor head (no critic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentNet {
    pub spec: NetSpec,
    /// When false, the transform sees the map feature alone.
    pub laser_fusion: bool,
    pub action_scale: [f64; 3],
}

pub struct StudentForward<'g, E: Elem> {
    pub z_hat: Tensor<'g, E>,
    pub q_hat: Tensor<'g, E>,
    pub z_tilde: Tensor<'g, E>,
    pub mu: Tensor<'g, E>,
    pub log_std: Tensor<'g, E>,
}

impl StudentNet {
    pub fn new(spec: NetSpec, laser_fusion: bool, action_scale: [f64; 3]) -> Self {
        StudentNet {
            spec,
            laser_fusion,
            action_scale,
        }
    }

    pub fn kind(&self) -> String {
        format!("student_policy;fusion={}", u8::from(self.laser_fusion))
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint(&self.kind())
    }

    pub fn transform_in_dim(&self) -> usize {
        if self.laser_fusion {
            self.spec.feat_map + self.spec.feat_laser
        } else {
            self.spec.feat_map
        }
    }

    pub fn state_dim(&self) -> usize {
        self.spec.feat_map + self.spec.feat_laser + self.spec.goal_dim
    }

    pub fn init_params<E: Elem, R: Rng>(&self, rng: &mut R) -> ParamSet<E> {
        let mut ps = ParamSet::new();
        let spec = &self.spec;
        init_map_encoder(&mut ps, spec, "map", rng).expect("fresh set");
        init_laser_encoder(&mut ps, spec, "laser", rng).expect("fresh set");
        init_linear(&mut ps, "trans.fc1", self.transform_in_dim(), spec.transform_hidden, rng)
            .expect("fresh set");
        init_linear(&mut ps, "trans.fc2", spec.transform_hidden, spec.feat_map, rng)
            .expect("fresh set");
        init_linear(&mut ps, "actor.fc1", self.state_dim(), spec.head_hidden, rng)
            .expect("fresh set");
        init_linear(&mut ps, "actor.mu", spec.head_hidden, spec.action_dim, rng)
            .expect("fresh set");
        ps.add("log_std", zeros(&[spec.action_dim])).expect("fresh set");
        ps
    }

    /// Copy of the teacher with an exact identity-on-z transform
    /// (`relu(z) - relu(-z) = z`). Requires `transform_hidden = 2 * feat_map`;
    /// the returned net carries that hidden width. Used for the zero-noise
    /// self-distillation fixed point.
    pub fn from_teacher<E: Elem>(
        teacher: &PolicyNet,
        tparams: &ParamSet<E>,
    ) -> Result<(StudentNet, ParamSet<E>), TensorError> {
        if teacher.mode != InputMode::MapLaser {
            return Err(TensorError::Invalid(
                "student can only be seeded from a map+laser teacher".into(),
            ));
        }
        let mut spec = teacher.spec.clone();
        let fm = spec.feat_map;
        spec.transform_hidden = 2 * fm;
        let net = StudentNet::new(spec.clone(), true, teacher.action_scale);
        let mut ps = ParamSet::new();
        for prefix in ["map", "laser", "actor"] {
            for (name, p) in tparams.iter() {
                if name.starts_with(&format!("{prefix}.")) {
                    ps.add(name, p.value.clone())?;
                }
            }
        }
        let in_dim = net.transform_in_dim();
        let mut w1 = Array2::<E>::zeros((in_dim, 2 * fm));
        for i in 0..fm {
            w1[(i, i)] = E::one();
            w1[(i, fm + i)] = -E::one();
        }
        let mut w2 = Array2::<E>::zeros((2 * fm, fm));
        for i in 0..fm {
            w2[(i, i)] = E::one();
            w2[(fm + i, i)] = -E::one();
        }
        ps.add("trans.fc1.w", w1.into_dyn())?;
        ps.add("trans.fc1.b", zeros(&[2 * fm]))?;
        ps.add("trans.fc2.w", w2.into_dyn())?;
        ps.add("trans.fc2.b", zeros(&[fm]))?;
        ps.add("log_std", tparams.get("log_std")?.value.clone())?;
        Ok((net, ps))
    }

    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamSet<E>,
        batch: &ObsBatch<E>,
        tracked: bool,
    ) -> Result<StudentForward<'g, E>, TensorError> {
        let maps = batch
            .maps
            .as_ref()
            .ok_or_else(|| TensorError::Invalid("student needs egocentric maps".into()))?;
        let x = g.constant(maps.clone().into_dyn());
        let z_hat = map_encoder(g, ps, &self.spec, "map", x, tracked)?;
        let q_hat = laser_encoder(
            g,
            ps,
            "laser",
            g.constant(batch.lasers.clone().into_dyn()),
            tracked,
        )?;
        let trans_in = if self.laser_fusion {
            Tensor::concat_cols(&[z_hat, q_hat])?
        } else {
            z_hat
        };
        let z_tilde = transform_module(g, ps, "trans", trans_in, tracked)?;
        let goal = g.constant(batch.goals.clone().into_dyn());
        let state = Tensor::concat_cols(&[z_tilde, q_hat, goal])?;
        let mu = actor_head(g, ps, "actor", state, tracked)?;
        let log_std = if tracked {
            g.param(ps, "log_std")?
        } else {
            g.frozen_param(ps, "log_std")?
        };
        Ok(StudentForward {
            z_hat,
            q_hat,
            z_tilde,
            mu,
            log_std,
        })
    }

    pub fn act<E: Elem, R: Rng>(
        &self,
        ps: &ParamSet<E>,
        batch: &ObsBatch<E>,
        mode: ActionMode,
        rng: Option<&mut R>,
    ) -> Result<ActOutput<E>, TensorError> {
        let g = Graph::<E>::new();
        let fwd = self.forward(&g, ps, batch, false)?;
        let mu = fwd
            .mu
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mu is 2-d");
        let log_std = fwd
            .log_std
            .value()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("log_std is 1-d");
        let values = Array1::<E>::zeros(mu.shape()[0]);
        finish_act(&g, mu, log_std, values, self.action_scale, mode, rng)
    }
}

/// Per-row tanh change-of-variables correction plus scale terms:
/// `sum_d [ log(1 - tanh(u_d)^2) + log(scale_d) ]`, computed stably as
/// `2 (ln 2 - u - softplus(-2u))`.
pub fn squash_correction<E: Elem>(u: &Array2<E>, scale: &[f64; 3]) -> Array1<E> {
    let ln2 = E::from_f64(std::f64::consts::LN_2);
    let two = E::from_f64(2.0);
    let log_scale: E = scale.iter().map(|s| E::from_f64(s.ln())).sum();
    let mut out = Array1::<E>::zeros(u.shape()[0]);
    for (i, row) in u.outer_iter().enumerate() {
        let mut corr = log_scale;
        for &ui in row.iter() {
            let sp = {
                let x = -two * ui;
                let z = if x > E::zero() { x } else { E::zero() };
                z + (E::one() + (-x.abs()).exp()).ln()
            };
            corr = corr + two * (ln2 - ui - sp);
        }
        out[i] = corr;
    }
    out
}

/// Per-row Gaussian log-density (plain arrays, same arithmetic as the graph
/// primitive).
pub fn gaussian_log_prob_arrays<E: Elem>(
    mu: &Array2<E>,
    log_std: &Array1<E>,
    x: &Array2<E>,
) -> Array1<E> {
    let ln_2pi = E::from_f64((2.0 * std::f64::consts::PI).ln());
    let two = E::from_f64(2.0);
    let mut out = Array1::<E>::zeros(mu.shape()[0]);
    for i in 0..mu.shape()[0] {
        let mut lp = E::zero();
        for j in 0..mu.shape()[1] {
            let sigma = log_std[j].exp();
            let u = (x[(i, j)] - mu[(i, j)]) / sigma;
            lp = lp - (u * u + two * log_std[j] + ln_2pi) / two;
        }
        out[i] = lp;
    }
    out
}

fn finish_act<E: Elem, R: Rng>(
    _g: &Graph<E>,
    mu: Array2<E>,
    log_std: Array1<E>,
    values: Array1<E>,
    scale: [f64; 3],
    mode: ActionMode,
    rng: Option<&mut R>,
) -> Result<ActOutput<E>, TensorError> {
    let (n, d) = (mu.shape()[0], mu.shape()[1]);
    let mut u = mu.clone();
    if mode == ActionMode::Sample {
        let rng = rng.ok_or_else(|| TensorError::Invalid("sampling needs an RNG".into()))?;
        for i in 0..n {
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                u[(i, j)] = u[(i, j)] + log_std[j].exp() * E::from_f64(eps);
            }
        }
    }
    let glp = gaussian_log_prob_arrays(&mu, &log_std, &u);
    let corr = squash_correction(&u, &scale);
    let log_probs = &glp - &corr;
    let mut env_actions = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = [0.0f64; 3];
        for j in 0..d.min(3) {
            a[j] = scale[j] * u[(i, j)].as_f64().tanh();
        }
        env_actions.push(a);
    }
    Ok(ActOutput {
        env_actions,
        pre_squash: u,
        log_probs,
        values,
    })
}
