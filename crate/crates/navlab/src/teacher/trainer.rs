use super::losses::{infonce_loss, ppo_loss, Minibatch};
use super::rollout::{collect_rollouts, gather_batch, EpisodeTracker, RolloutBuffer};
use super::{io_err, AgentVariant, ContrastiveConfig, PpoConfig, TrainError};
use crate::config::RunConfig;
use crate::navenv::{make_vec, splitmix64};
use crate::policy::{augment, map_encoder, InputMode, ObsBatch, PolicyNet};
use crate::tensornet::{
    ema_update, linear_lr, save_checkpoint, AdamConfig, CheckpointMeta, Elem, Graph, MetaValue,
    ParamSet,
};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub ppo_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub infonce: f64,
    pub grad_norm: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
}

/// One PPO update over a full rollout buffer: `nepochs` passes over
/// `nminibatch` shuffled splits, with the contrastive auxiliary joined in
/// when `beta_t > 0`. The key encoder moves by EMA after every optimizer
/// step. With `beta_t = 0` no augmentation randomness is consumed and the
/// update is plain PPO.
#[allow(clippy::too_many_arguments)]
pub fn teacher_update<E: Elem, R: Rng>(
    buffer: &mut RolloutBuffer,
    net: &PolicyNet,
    params: &mut ParamSet<E>,
    key_params: Option<&mut ParamSet<E>>,
    ppo_cfg: &PpoConfig,
    con_cfg: &ContrastiveConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    let (adv_mean, adv_std) = buffer.normalize_advantages();
    let total = buffer.len();
    let contrastive = con_cfg.beta_t > 0.0 && net.mode == InputMode::MapLaser;
    let mut key_params = key_params;

    let mut stats = UpdateStats {
        adv_mean,
        adv_std,
        ..UpdateStats::default()
    };
    let mut n_steps = 0usize;
    let adam = AdamConfig::default();

    let mut indices: Vec<usize> = (0..total).collect();
    for _ in 0..ppo_cfg.nepochs {
        indices.shuffle(rng);
        let mb_size = total.div_ceil(ppo_cfg.nminibatch);
        for mb_idx in indices.chunks(mb_size) {
            let mb = build_minibatch::<E>(buffer, mb_idx, net);
            let g = Graph::<E>::new();
            let (ppo_total, ppo_stats) = ppo_loss(&g, net, params, &mb, ppo_cfg)?;

            let (loss, nce_value) = if contrastive {
                let (views_q, views_k) =
                    augmented_views::<E, R>(buffer, mb_idx, &con_cfg.augment, rng);
                let q = net
                    .encode_map(&g, params, &views_q, true)?
                    .l2_normalize_rows()?;
                let key_ps: &ParamSet<E> = key_params.as_deref().ok_or_else(|| {
                    TrainError::Invalid("contrastive update needs a key encoder".into())
                })?;
                let k_feat = map_encoder(&g, key_ps, &net.spec, "map", g.constant(views_k.into_dyn()), false)?
                    .l2_normalize_rows()?
                    .value()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("keys are 2-d");
                let nce = infonce_loss(&g, q, &k_feat, con_cfg.tau)?;
                let nce_value = nce.scalar_value();
                (ppo_total.add(nce.mul_scalar(con_cfg.beta_t))?, nce_value)
            } else {
                (ppo_total, 0.0)
            };

            g.backward_into(loss, params)?;
            let grad_norm = params.clip_grad_norm(ppo_cfg.max_grad_norm);
            params.adam_step(lr, &adam)?;
            if contrastive {
                let key_ps = key_params.as_deref_mut().expect("checked above");
                ema_update(key_ps, &params.subset("map."), con_cfg.ema_momentum)?;
            }

            stats.ppo_loss += ppo_stats.policy;
            stats.value_loss += ppo_stats.value;
            stats.entropy += ppo_stats.entropy;
            stats.infonce += nce_value;
            stats.grad_norm += grad_norm;
            n_steps += 1;
        }
    }
    let n = n_steps.max(1) as f64;
    stats.ppo_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.infonce /= n;
    stats.grad_norm /= n;
    Ok(stats)
}

fn build_minibatch<E: Elem>(
    buffer: &RolloutBuffer,
    idx: &[usize],
    net: &PolicyNet,
) -> Minibatch<E> {
    let batch: ObsBatch<E> = gather_batch(&buffer.obs, idx, net.mode == InputMode::MapLaser);
    let n = idx.len();
    let mut actions = Array2::<E>::zeros((n, 3));
    let mut old_lp = Array1::<E>::zeros(n);
    let mut adv = Array1::<E>::zeros(n);
    let mut ret = Array1::<E>::zeros(n);
    for (row, &i) in idx.iter().enumerate() {
        for j in 0..3 {
            actions[(row, j)] = E::from_f64(buffer.actions[i][j] as f64);
        }
        old_lp[row] = E::from_f64(buffer.log_probs[i] as f64);
        adv[row] = E::from_f64(buffer.advantages[i] as f64);
        ret[row] = E::from_f64(buffer.returns[i] as f64);
    }
    Minibatch {
        batch,
        actions,
        old_log_probs: old_lp,
        advantages: adv,
        returns: ret,
    }
}

/// Two independent augmented views of each clean ego map in the minibatch.
/// Augmentation parameters are drawn sequentially (deterministic for a
/// given RNG stream); per-pixel work is data-parallel free.
fn augmented_views<E: Elem, R: Rng>(
    buffer: &RolloutBuffer,
    idx: &[usize],
    cfg: &crate::policy::AugmentConfig,
    rng: &mut R,
) -> (Array4<E>, Array4<E>) {
    let n = idx.len();
    let dims = buffer.obs[idx[0]].map.dim();
    let mut q = Array4::<E>::zeros((n, dims.0, dims.1, dims.2));
    let mut k = Array4::<E>::zeros((n, dims.0, dims.1, dims.2));
    for (row, &i) in idx.iter().enumerate() {
        let vq: Array3<f32> = augment(&buffer.obs[i].map, cfg, rng);
        let vk: Array3<f32> = augment(&buffer.obs[i].map, cfg, rng);
        for ((c, y, x), v) in vq.indexed_iter() {
            q[(row, c, y, x)] = E::from_f64(*v as f64);
        }
        for ((c, y, x), v) in vk.indexed_iter() {
            k[(row, c, y, x)] = E::from_f64(*v as f64);
        }
    }
    (q, k)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub updates: u64,
    pub env_steps: u64,
    pub final_checkpoint: PathBuf,
    /// Mean return over the last logging window.
    pub recent_return: f64,
    pub recent_success: f64,
}

/// Full PPO training loop: collect -> GAE -> update, with CSV logs and
/// periodic checkpoints under `out_dir`.
pub fn train_teacher(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    train_teacher_impl::<f32>(cfg, out_dir, resume)
}

fn train_teacher_impl<E: Elem>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    let variant = cfg.variant;
    let ppo_cfg = cfg.ppo;
    let mut con_cfg = cfg.contrastive;
    if !variant.uses_contrastive() {
        con_cfg.beta_t = 0.0;
    }
    let net = PolicyNet::new(cfg.net.clone(), variant.input_mode(), cfg.env.speed_limit);

    std::fs::create_dir_all(out_dir.join("checkpoints")).map_err(io_err(out_dir))?;
    cfg.save(out_dir.join("config.toml"))
        .map_err(|e| TrainError::Invalid(e.to_string()))?;

    let env_cfg = cfg.train_env();
    env_cfg.validate()?;
    let mut venv = make_vec(&env_cfg, ppo_cfg.n_envs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed.wrapping_add(0x7EAC)));
    let mut params: ParamSet<E> = net.init_params(&mut rng);
    let mut start_update: u64 = 0;
    let mut env_steps: u64 = 0;
    if let Some(ckpt) = resume {
        let (loaded, meta) =
            crate::tensornet::load_checkpoint::<E, _>(ckpt, &net.fingerprint())?;
        params = loaded;
        if let Some(MetaValue::Number(s)) = meta.get("env_steps") {
            env_steps = *s as u64;
        }
        if let Some(MetaValue::Number(u)) = meta.get("update_index") {
            start_update = *u as u64;
        }
        // Distinct stream per segment so resumed runs don't replay the
        // original action noise.
        rng = ChaCha8Rng::seed_from_u64(splitmix64(
            cfg.seed.wrapping_add(0x7EAC).wrapping_add(start_update),
        ));
    }

    let mut key_params: Option<ParamSet<E>> = if con_cfg.beta_t > 0.0 {
        Some(params.subset("map."))
    } else {
        None
    };

    let steps_per_update = (ppo_cfg.nsteps * ppo_cfg.n_envs) as u64;
    let total_updates = ppo_cfg.total_steps.div_ceil(steps_per_update);
    let checkpoint_every = (total_updates / 4).max(1);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = new_csv(
        &metrics_path,
        "update_index,mean_return,ppo_loss,value_loss,entropy,infonce_loss,lr\n",
        start_update > 0,
    )?;
    let episodes_path = out_dir.join("episodes.csv");
    let mut episodes_csv = new_csv(
        &episodes_path,
        "env_steps,episode_return,activations,success,collision_steps,length\n",
        start_update > 0,
    )?;

    let mut tracker = EpisodeTracker::new(ppo_cfg.n_envs, env_cfg.scene.goal_count);
    let mut recent: Vec<(f64, bool)> = Vec::new();
    let t0 = std::time::Instant::now();

    for update in start_update..total_updates {
        let lr = linear_lr(env_steps, ppo_cfg.total_steps, ppo_cfg.lr0);
        let compose = variant.compose(cfg.teacher_clean_laser);
        let mut buffer =
            collect_rollouts(&mut venv, &net, &params, &ppo_cfg, &compose, &mut rng, &mut tracker)?;
        buffer.compute_advantages(ppo_cfg.gamma, ppo_cfg.gae_lambda)?;
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
            recent.push((ep.total_reward, ep.success));
            if recent.len() > 100 {
                recent.remove(0);
            }
        }

        let stats = teacher_update(
            &mut buffer,
            &net,
            &mut params,
            key_params.as_mut(),
            &ppo_cfg,
            &con_cfg,
            lr,
            &mut rng,
        )?;

        let mean_return = if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().map(|(r, _)| r).sum::<f64>() / recent.len() as f64
        };
        writeln!(
            metrics,
            "{},{:.4},{:.6},{:.6},{:.6},{:.6},{:.8}",
            update, mean_return, stats.ppo_loss, stats.value_loss, stats.entropy, stats.infonce, lr
        )
        .map_err(io_err(&metrics_path))?;

        if (update + 1) % checkpoint_every == 0 || update + 1 == total_updates {
            let path = out_dir.join(format!("checkpoints/step_{env_steps}.bin"));
            save_ppo_checkpoint(&net, &params, &path, variant, &con_cfg, env_steps, update + 1)?;
        }
        if update % 20 == 0 || update + 1 == total_updates {
            let success = if recent.is_empty() {
                0.0
            } else {
                recent.iter().filter(|(_, s)| *s).count() as f64 / recent.len() as f64
            };
            let sps = env_steps.saturating_sub(start_update * steps_per_update) as f64
                / t0.elapsed().as_secs_f64();
            println!(
                "[{}] update {update}/{total_updates} steps {env_steps} return {mean_return:.2} success {:.2} nce {:.3} lr {lr:.2e} ({sps:.0} sps)",
                variant.name(),
                success,
                stats.infonce,
            );
        }
    }

    let final_path = out_dir.join("checkpoints/final.bin");
    save_ppo_checkpoint(
        &net,
        &params,
        &final_path,
        variant,
        &con_cfg,
        env_steps,
        total_updates,
    )?;

    let recent_return = if recent.is_empty() {
        0.0
    } else {
        recent.iter().map(|(r, _)| r).sum::<f64>() / recent.len() as f64
    };
    let recent_success = if recent.is_empty() {
        0.0
    } else {
        recent.iter().filter(|(_, s)| *s).count() as f64 / recent.len() as f64
    };
    Ok(TrainSummary {
        updates: total_updates,
        env_steps,
        final_checkpoint: final_path,
        recent_return,
        recent_success,
    })
}

fn save_ppo_checkpoint<E: Elem>(
    net: &PolicyNet,
    params: &ParamSet<E>,
    path: &Path,
    variant: AgentVariant,
    con_cfg: &ContrastiveConfig,
    env_steps: u64,
    update_index: u64,
) -> Result<(), TrainError> {
    let mut meta = CheckpointMeta::new();
    meta.insert("env_steps".into(), MetaValue::Number(env_steps as f64));
    meta.insert("update_index".into(), MetaValue::Number(update_index as f64));
    meta.insert("beta_contrastive".into(), MetaValue::Number(con_cfg.beta_t));
    meta.insert("variant".into(), MetaValue::Text(variant.name().into()));
    meta.insert("kind".into(), MetaValue::Text("ppo_policy".into()));
    save_checkpoint(params, path, &net.fingerprint(), &meta)?;
    Ok(())
}

pub(crate) fn new_csv(
    path: &Path,
    header: &str,
    append: bool,
) -> Result<std::fs::File, TrainError> {
    use std::fs::OpenOptions;
    if append && path.exists() {
        OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(io_err(path))
    } else {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(header.as_bytes()).map_err(io_err(path))?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Scene;
    use crate::navenv::EnvConfig;
    use crate::policy::NetSpec;

    fn quick_cfg() -> RunConfig {
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
        c.ppo.total_steps = 96;
        c
    }

    #[test]
    fn short_training_run_produces_artifacts_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = quick_cfg();
        let summary = train_teacher(&cfg, &out, None).unwrap();
        assert_eq!(summary.env_steps, 96);
        assert!(summary.final_checkpoint.exists());
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("config.toml").exists());

        // Resume continues the step counter exactly.
        let mut cfg2 = cfg.clone();
        cfg2.ppo.total_steps = 160;
        let out2 = dir.path().join("run2");
        let resumed = train_teacher(&cfg2, &out2, Some(&summary.final_checkpoint)).unwrap();
        assert_eq!(resumed.env_steps, 160);
        let (_, meta) = crate::tensornet::load_checkpoint_raw::<f32, _>(&resumed.final_checkpoint)
            .map(|(p, f, m)| ((p, f), m))
            .unwrap();
        match meta.get("env_steps") {
            Some(MetaValue::Number(s)) => assert_eq!(*s as u64, 160),
            other => panic!("missing env_steps meta: {other:?}"),
        }
    }

    #[test]
    fn update_moves_parameters_and_key_encoder() {
        let cfg = quick_cfg();
        let env_cfg = cfg.train_env();
        let mut venv = make_vec(&env_cfg, 2).unwrap();
        let net = PolicyNet::new(cfg.net.clone(), InputMode::MapLaser, cfg.env.speed_limit);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params: ParamSet<f32> = net.init_params(&mut rng);
        let mut key = params.subset("map.");
        let key_before = key.checksum();
        let mut tracker = EpisodeTracker::new(2, 3);
        let ppo_cfg = PpoConfig {
            nsteps: 16,
            n_envs: 2,
            nminibatch: 2,
            ..PpoConfig::default()
        };
        let con = ContrastiveConfig::default();
        let mut buffer = collect_rollouts(
            &mut venv,
            &net,
            &params,
            &ppo_cfg,
            &crate::teacher::ObsCompose::all_clean(),
            &mut rng,
            &mut tracker,
        )
        .unwrap();
        buffer.compute_advantages(0.99, 0.95).unwrap();
        let before = params.checksum();
        teacher_update(
            &mut buffer,
            &net,
            &mut params,
            Some(&mut key),
            &ppo_cfg,
            &con,
            1e-3,
            &mut rng,
        )
        .unwrap();
        assert_ne!(params.checksum(), before);
        assert_ne!(key.checksum(), key_before, "EMA should move the key encoder");
    }
}
