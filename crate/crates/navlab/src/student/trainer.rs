use super::collect::{collect_paired, gather_distill, DistillBuffer};
use super::losses::{feature_distill_loss, policy_distill_loss};
use super::StudentConfig;
use crate::config::RunConfig;
use crate::navenv::{make_vec, splitmix64};
use crate::policy::{PolicyNet, StudentNet};
use crate::teacher::new_csv;
use crate::teacher::{io_err, EpisodeTracker, TrainError};
use crate::tensornet::{
    linear_lr, load_checkpoint, save_checkpoint, AdamConfig, CheckpointMeta, Elem, Graph,
    MetaValue, ParamSet,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, Default)]
pub struct StudentUpdateStats {
    pub fd_loss: f64,
    pub pd_loss: f64,
    /// Mean cosine similarity between transformed and teacher features.
    pub mean_cosine: f64,
    pub grad_norm: f64,
}

/// One supervised update: `nepochs` passes over `nminibatch` shuffled splits
/// of the paired buffer, minimizing `alpha * FD + beta * PD`.
pub fn student_update<E: Elem, R: Rng>(
    buffer: &DistillBuffer,
    student: &StudentNet,
    params: &mut ParamSet<E>,
    cfg: &StudentConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StudentUpdateStats, TrainError> {
    let total = buffer.len();
    if total == 0 {
        return Err(TrainError::Invalid("empty distillation buffer".into()));
    }
    let adam = AdamConfig::default();
    let mut stats = StudentUpdateStats::default();
    let mut n_steps = 0usize;

    let mut indices: Vec<usize> = (0..total).collect();
    for _ in 0..cfg.nepochs {
        indices.shuffle(rng);
        let mb_size = total.div_ceil(cfg.nminibatch);
        for mb_idx in indices.chunks(mb_size) {
            let mb = gather_distill::<E>(buffer, mb_idx);
            let g = Graph::<E>::new();
            let fwd = student.forward(&g, params, &mb.noisy, true)?;
            let fd = feature_distill_loss(&g, &mb.teacher_z, fwd.z_tilde)?;
            let pd = policy_distill_loss(
                &g,
                &mb.teacher_mu,
                &mb.teacher_log_std,
                fwd.mu,
                fwd.log_std,
            )?;
            let fd_value = fd.scalar_value();
            let pd_value = pd.scalar_value();
            let loss = fd.mul_scalar(cfg.alpha_fd).add(pd.mul_scalar(cfg.beta_pd))?;
            g.backward_into(loss, params)?;
            let grad_norm = params.clip_grad_norm(cfg.max_grad_norm);
            params.adam_step(lr, &adam)?;

            stats.fd_loss += fd_value;
            stats.pd_loss += pd_value;
            stats.mean_cosine += -fd_value;
            stats.grad_norm += grad_norm;
            n_steps += 1;
        }
    }
    let n = n_steps.max(1) as f64;
    stats.fd_loss /= n;
    stats.pd_loss /= n;
    stats.mean_cosine /= n;
    stats.grad_norm /= n;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct StudentSummary {
    pub env_steps: u64,
    pub final_checkpoint: PathBuf,
    /// Mean cosine similarity over the last quarter of training.
    pub converged_cosine: f64,
}

/// Distill a frozen teacher checkpoint into a student under the run config.
/// `teacher_ckpt` must point at a PPO checkpoint produced by
/// [`crate::teacher::train_teacher`] with a map+laser input mode.
pub fn train_student(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
) -> Result<StudentSummary, TrainError> {
    train_student_impl::<f32>(cfg, teacher_ckpt, out_dir)
}

fn train_student_impl<E: Elem>(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
) -> Result<StudentSummary, TrainError> {
    let scfg = cfg.student;
    let teacher = PolicyNet::new(
        cfg.net.clone(),
        crate::policy::InputMode::MapLaser,
        cfg.env.speed_limit,
    );
    let (teacher_params, meta) =
        load_checkpoint::<E, _>(teacher_ckpt, &teacher.fingerprint())?;
    if scfg.require_plain_teacher {
        match meta.get("beta_contrastive") {
            Some(MetaValue::Number(b)) if *b == 0.0 => {}
            other => {
                return Err(TrainError::Invalid(format!(
                    "--no-contrastive-teacher expects a teacher trained with beta_t = 0, \
                     checkpoint metadata says {other:?}"
                )))
            }
        }
    }
    let teacher_checksum = teacher_params.checksum();

    let student = StudentNet::new(cfg.net.clone(), scfg.laser_fusion, cfg.env.speed_limit);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed.wrapping_add(0x57D0)));
    let mut params: ParamSet<E> = if scfg.init_from_teacher {
        let (seeded_net, seeded) = StudentNet::from_teacher(&teacher, &teacher_params)?;
        if seeded_net.spec != student.spec {
            // Transform width differs; fall back to the identity-capable net.
            let mut ps = seeded;
            ps.zero_grads();
            return run_loop(
                cfg, &scfg, seeded_net, &mut ps, teacher, teacher_params, teacher_checksum,
                out_dir, &mut rng,
            );
        }
        seeded
    } else {
        student.init_params(&mut rng)
    };
    run_loop(
        cfg,
        &scfg,
        student,
        &mut params,
        teacher,
        teacher_params,
        teacher_checksum,
        out_dir,
        &mut rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop<E: Elem>(
    cfg: &RunConfig,
    scfg: &StudentConfig,
    student: StudentNet,
    params: &mut ParamSet<E>,
    teacher: PolicyNet,
    teacher_params: ParamSet<E>,
    teacher_checksum: u64,
    out_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<StudentSummary, TrainError> {
    std::fs::create_dir_all(out_dir.join("checkpoints")).map_err(io_err(out_dir))?;
    cfg.save(out_dir.join("config.toml"))
        .map_err(|e| TrainError::Invalid(e.to_string()))?;

    let mut env_cfg = cfg.train_env();
    env_cfg.seed = env_cfg.seed.wrapping_add(1_000);
    env_cfg.validate()?;
    let env_cfg = env_cfg;
    let mut venv = make_vec(&env_cfg, scfg.n_envs)?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = new_csv(&metrics_path, "update_index,fd_loss,pd_loss,mean_cosine,lr\n", false)?;
    let episodes_path = out_dir.join("episodes.csv");
    let mut episodes_csv = new_csv(
        &episodes_path,
        "env_steps,episode_return,activations,success,collision_steps,length\n",
        false,
    )?;

    let steps_per_update = (scfg.nsteps * scfg.n_envs) as u64;
    let total_updates = scfg.total_steps.div_ceil(steps_per_update);
    let mut tracker = EpisodeTracker::new(scfg.n_envs, env_cfg.scene.goal_count);
    let mut env_steps = 0u64;
    let mut cosine_tail: Vec<f64> = Vec::new();
    let tail_from = (total_updates as f64 * 0.75) as u64;
    let t0 = std::time::Instant::now();

    for update in 0..total_updates {
        let lr = linear_lr(env_steps, scfg.total_steps, scfg.lr0);
        let buffer = collect_paired(
            &mut venv,
            &student,
            params,
            &teacher,
            &teacher_params,
            scfg,
            rng,
            &mut tracker,
        )?;
        env_steps += steps_per_update;

        for ep in tracker.completed.drain(..) {
            writeln!(
                episodes_csv,
                "{},{:.4},{},{},{},{}",
                env_steps,
                ep.total_reward,
                ep.activations,
                u8::from(ep.success),
                ep.collision_steps,
                ep.length
            )
            .map_err(io_err(&episodes_path))?;
        }

        let stats = student_update(&buffer, &student, params, scfg, lr, rng)?;
        writeln!(
            metrics,
            "{},{:.6},{:.6},{:.6},{:.8}",
            update, stats.fd_loss, stats.pd_loss, stats.mean_cosine, lr
        )
        .map_err(io_err(&metrics_path))?;
        if update >= tail_from {
            cosine_tail.push(stats.mean_cosine);
        }

        if update % 20 == 0 || update + 1 == total_updates {
            let sps = env_steps as f64 / t0.elapsed().as_secs_f64();
            println!(
                "[student] update {update}/{total_updates} steps {env_steps} fd {:.3} pd {:.3} cos {:.3} lr {lr:.2e} ({sps:.0} sps)",
                stats.fd_loss, stats.pd_loss, stats.mean_cosine
            );
        }
    }

    if teacher_params.checksum() != teacher_checksum {
        return Err(TrainError::Invalid(
            "teacher parameters changed during distillation".into(),
        ));
    }

    let final_path = out_dir.join("checkpoints/final.bin");
    let mut meta = CheckpointMeta::new();
    meta.insert("env_steps".into(), MetaValue::Number(env_steps as f64));
    meta.insert("alpha_fd".into(), MetaValue::Number(scfg.alpha_fd));
    meta.insert("beta_pd".into(), MetaValue::Number(scfg.beta_pd));
    meta.insert(
        "laser_fusion".into(),
        MetaValue::Number(f64::from(u8::from(scfg.laser_fusion))),
    );
    meta.insert("kind".into(), MetaValue::Text("student_policy".into()));
    save_checkpoint(params, &final_path, &student.fingerprint(), &meta)?;

    let converged_cosine = if cosine_tail.is_empty() {
        0.0
    } else {
        cosine_tail.iter().sum::<f64>() / cosine_tail.len() as f64
    };
    Ok(StudentSummary {
        env_steps,
        final_checkpoint: final_path,
        converged_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Scene;
    use crate::navenv::{EnvConfig, NoiseModel};
    use crate::policy::{ActionMode, InputMode, NetSpec, ObsBatch};
    use crate::teacher::AgentVariant;

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::desk_scale();
        c.env = EnvConfig {
            scene: Scene::desk(),
            resolution: 0.08,
            episode_steps: 40,
            seed: 0,
            ..EnvConfig::default()
        };
        c.net = NetSpec {
            map_size: 32,
            conv_channels: [4, 6, 6],
            feat_map: 8,
            laser_hidden: 16,
            feat_laser: 6,
            head_hidden: 16,
            transform_hidden: 16,
            ..NetSpec::default()
        };
        c.ppo.nsteps = 16;
        c.ppo.n_envs = 2;
        c.ppo.nminibatch = 2;
        c.ppo.total_steps = 64;
        c.student.nsteps = 16;
        c.student.n_envs = 2;
        c.student.total_steps = 96;
        c
    }

    #[test]
    fn end_to_end_distillation_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let tsum = crate::teacher::train_teacher(&cfg, &dir.path().join("teacher"), None).unwrap();
        let ssum = train_student(&cfg, &tsum.final_checkpoint, &dir.path().join("student")).unwrap();
        assert_eq!(ssum.env_steps, 96);
        assert!(ssum.final_checkpoint.exists());
        let metrics = std::fs::read_to_string(dir.path().join("student/metrics.csv")).unwrap();
        assert!(metrics.starts_with("update_index,fd_loss,pd_loss,mean_cosine,lr"));
        assert!(metrics.lines().count() >= 3);
    }

    #[test]
    fn plain_teacher_flag_rejects_contrastive_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.variant = AgentVariant::Teacher; // contrastive on by default
        let tsum = crate::teacher::train_teacher(&cfg, &dir.path().join("teacher"), None).unwrap();
        cfg.student.require_plain_teacher = true;
        let err = train_student(&cfg, &tsum.final_checkpoint, &dir.path().join("student"))
            .unwrap_err();
        assert!(err.to_string().contains("no-contrastive-teacher"), "{err}");
    }

    #[test]
    fn self_distillation_fixed_point_has_minimal_loss() {
        // Zero noise, student seeded from the teacher with the identity
        // transform: total loss ~ alpha * (-1) + 0 at step 0.
        let mut cfg = tiny_cfg();
        cfg.env.noise = NoiseModel::zero();
        let teacher = PolicyNet::new(cfg.net.clone(), InputMode::MapLaser, cfg.env.speed_limit);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tp: ParamSet<f64> = teacher.init_params(&mut rng);
        let (student, sp) = StudentNet::from_teacher(&teacher, &tp).unwrap();

        let env = crate::navenv::NavEnv::new(cfg.train_env()).unwrap();
        let (noisy, clean) = (env.observe(false), env.observe(true));
        assert_eq!(noisy, clean);
        let extent = cfg.env.scene.extent;
        let nb: ObsBatch<f64> = ObsBatch::from_observation(&noisy, extent);
        let cb: ObsBatch<f64> = ObsBatch::from_observation(&clean, extent);

        let g = Graph::<f64>::new();
        let tf = teacher.forward(&g, &tp, &cb, false).unwrap();
        let tz = tf
            .z
            .unwrap()
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let tmu = tf.mu.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let tls = tf
            .log_std
            .value()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();

        let sf = student.forward(&g, &sp, &nb, false).unwrap();
        let fd = feature_distill_loss(&g, &tz, sf.z_tilde).unwrap().scalar_value();
        let pd = policy_distill_loss(&g, &tmu, &tls, sf.mu, sf.log_std)
            .unwrap()
            .scalar_value();
        assert!((fd + 1.0).abs() < 1e-9, "fd {fd}");
        assert!(pd.abs() < 1e-9, "pd {pd}");
        let total = cfg.student.alpha_fd * fd + cfg.student.beta_pd * pd;
        assert!((total + cfg.student.alpha_fd).abs() < 1e-9);

        // And the mean action matches the teacher's exactly.
        let ta = teacher
            .act::<f64, ChaCha8Rng>(&tp, &cb, ActionMode::Mean, None)
            .unwrap();
        let sa = student
            .act::<f64, ChaCha8Rng>(&sp, &nb, ActionMode::Mean, None)
            .unwrap();
        for (x, y) in ta.env_actions[0].iter().zip(sa.env_actions[0].iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
