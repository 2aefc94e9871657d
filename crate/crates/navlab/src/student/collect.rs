use super::StudentConfig;
use crate::navenv::VecEnv;
use crate::policy::{ActionMode, ObsBatch, PolicyNet, StudentNet, pose_to_input};
use crate::teacher::{EpisodeTracker, TrainError};
use crate::tensornet::{Elem, Graph, ParamSet};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;

/// One time step of paired data: the noisy observation the student acts on,
/// its clean twin, and the frozen teacher's targets at the clean state.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub noisy_map: Array3<f32>,
    pub noisy_laser: Array1<f32>,
    pub noisy_goal: [f32; 2],
    pub noisy_pose: [f32; 3],
    pub clean_map: Array3<f32>,
    pub clean_laser: Array1<f32>,
    pub clean_goal: [f32; 2],
    pub teacher_z: Array1<f32>,
    pub teacher_mu: [f32; 3],
    /// Logged only; distillation never uses it.
    pub teacher_value: f32,
}

#[derive(Debug, Default)]
pub struct DistillBuffer {
    pub samples: Vec<PairedSample>,
    /// State-independent, shared by every sample in the batch.
    pub teacher_log_std: [f32; 3],
}

impl DistillBuffer {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Roll the student (sampled actions) in the noisy environment; for every
/// step store the paired observations plus the teacher's feature and policy
/// targets computed from the clean pair.
pub fn collect_paired<E: Elem, R: Rng>(
    venv: &mut VecEnv,
    student: &StudentNet,
    student_params: &ParamSet<E>,
    teacher: &PolicyNet,
    teacher_params: &ParamSet<E>,
    cfg: &StudentConfig,
    rng: &mut R,
    tracker: &mut EpisodeTracker,
) -> Result<DistillBuffer, TrainError> {
    let n_envs = venv.len();
    let extent = venv.envs()[0].config().scene.extent;
    let mut buffer = DistillBuffer {
        samples: Vec::with_capacity(cfg.nsteps * n_envs),
        teacher_log_std: read_log_std(teacher_params)?,
    };

    // (noisy, clean) pairs per env.
    let mut current = venv.observe_all();

    for _ in 0..cfg.nsteps {
        // Student acts on the noisy side.
        let noisy_batch: ObsBatch<E> = ObsBatch::build(
            Some(
                &current
                    .iter()
                    .map(|(n, _)| &n.ego_map.values)
                    .collect::<Vec<_>>(),
            ),
            &current.iter().map(|(n, _)| &n.laser).collect::<Vec<_>>(),
            &current.iter().map(|(n, _)| n.goal_vec).collect::<Vec<_>>(),
            &current
                .iter()
                .map(|(n, _)| pose_to_input(&n.pose_estimate, extent))
                .collect::<Vec<_>>(),
        );
        // Teacher targets come from the clean side.
        let clean_batch: ObsBatch<E> = ObsBatch::build(
            Some(
                &current
                    .iter()
                    .map(|(_, c)| &c.ego_map.values)
                    .collect::<Vec<_>>(),
            ),
            &current.iter().map(|(_, c)| &c.laser).collect::<Vec<_>>(),
            &current.iter().map(|(_, c)| c.goal_vec).collect::<Vec<_>>(),
            &current
                .iter()
                .map(|(_, c)| pose_to_input(&c.pose_estimate, extent))
                .collect::<Vec<_>>(),
        );

        let g = Graph::<E>::new();
        let tfwd = teacher.forward(&g, teacher_params, &clean_batch, false)?;
        let t_z = tfwd.z.expect("teacher consumes maps").value();
        let t_mu = tfwd.mu.value();
        let t_v = tfwd.value.value();

        let actions = if cfg.teacher_driven_collect {
            teacher
                .act(teacher_params, &clean_batch, ActionMode::Sample, Some(rng))?
                .env_actions
        } else {
            student
                .act(student_params, &noisy_batch, ActionMode::Sample, Some(rng))?
                .env_actions
        };

        let steps = venv.step_all(&actions)?;
        for (e, s) in steps.iter().enumerate() {
            let (noisy, clean) = (&current[e].0, &current[e].1);
            let d = student.spec.feat_map;
            let mut tz = Array1::<f32>::zeros(d);
            for j in 0..d {
                tz[j] = t_z[[e, j]].as_f64() as f32;
            }
            buffer.samples.push(PairedSample {
                noisy_map: noisy.ego_map.values.clone(),
                noisy_laser: noisy.laser.clone(),
                noisy_goal: noisy.goal_vec,
                noisy_pose: pose_to_input(&noisy.pose_estimate, extent),
                clean_map: clean.ego_map.values.clone(),
                clean_laser: clean.laser.clone(),
                clean_goal: clean.goal_vec,
                teacher_z: tz,
                teacher_mu: [
                    t_mu[[e, 0]].as_f64() as f32,
                    t_mu[[e, 1]].as_f64() as f32,
                    t_mu[[e, 2]].as_f64() as f32,
                ],
                teacher_value: t_v[[e]].as_f64() as f32,
            });
            tracker.record(
                e,
                s.result.reward,
                s.result.info.goal_activated,
                s.result.info.collision,
                s.result.done,
            );
            let (n, c) = s.next_obs();
            current[e] = (n.clone(), c.clone());
        }
    }
    Ok(buffer)
}

fn read_log_std<E: Elem>(teacher_params: &ParamSet<E>) -> Result<[f32; 3], TrainError> {
    let p = teacher_params.get("log_std")?;
    let mut out = [0.0f32; 3];
    for (i, v) in p.value.iter().take(3).enumerate() {
        out[i] = v.as_f64() as f32;
    }
    Ok(out)
}

/// Gather selected samples into network batches and target arrays.
pub struct DistillMinibatch<E: Elem> {
    pub noisy: ObsBatch<E>,
    pub teacher_z: Array2<E>,
    pub teacher_mu: Array2<E>,
    pub teacher_log_std: Array1<E>,
}

pub fn gather_distill<E: Elem>(buf: &DistillBuffer, idx: &[usize]) -> DistillMinibatch<E> {
    let maps: Vec<&Array3<f32>> = idx.iter().map(|&i| &buf.samples[i].noisy_map).collect();
    let lasers: Vec<&Array1<f32>> = idx.iter().map(|&i| &buf.samples[i].noisy_laser).collect();
    let goals: Vec<[f32; 2]> = idx.iter().map(|&i| buf.samples[i].noisy_goal).collect();
    let poses: Vec<[f32; 3]> = idx.iter().map(|&i| buf.samples[i].noisy_pose).collect();
    let noisy = ObsBatch::build(Some(&maps), &lasers, &goals, &poses);

    let d = buf.samples[idx[0]].teacher_z.len();
    let mut tz = Array2::<E>::zeros((idx.len(), d));
    let mut tmu = Array2::<E>::zeros((idx.len(), 3));
    for (row, &i) in idx.iter().enumerate() {
        for j in 0..d {
            tz[(row, j)] = E::from_f64(buf.samples[i].teacher_z[j] as f64);
        }
        for j in 0..3 {
            tmu[(row, j)] = E::from_f64(buf.samples[i].teacher_mu[j] as f64);
        }
    }
    let tls = Array1::from_iter(
        buf.teacher_log_std
            .iter()
            .map(|&v| E::from_f64(v as f64)),
    );
    DistillMinibatch {
        noisy,
        teacher_z: tz,
        teacher_mu: tmu,
        teacher_log_std: tls,
    }
}
