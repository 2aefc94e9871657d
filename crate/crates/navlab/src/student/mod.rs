//! Supervised distillation of a frozen teacher into a noise-robust student:
//! feature distillation (negative cosine) plus policy distillation (Gaussian
//! KL) under a weighted objective.

mod collect;
mod losses;
mod trainer;

pub use collect::{collect_paired, gather_distill, DistillBuffer, DistillMinibatch, PairedSample};
pub use losses::{feature_distill_loss, policy_distill_loss};
pub use trainer::{student_update, train_student, StudentSummary, StudentUpdateStats};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    /// Feature-distillation weight.
    pub alpha_fd: f64,
    /// Policy-distillation weight.
    pub beta_pd: f64,
    pub n_envs: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub nsteps: usize,
    pub nepochs: usize,
    pub nminibatch: usize,
    pub max_grad_norm: f64,
    /// When false, the transform consumes the map feature alone
    /// (`--no-laser-fusion`).
    pub laser_fusion: bool,
    /// Seed the student's encoders/head from the teacher instead of fresh
    /// initialization.
    pub init_from_teacher: bool,
    /// Drive collection with the teacher's policy instead of the student's.
    pub teacher_driven_collect: bool,
    /// Require the teacher checkpoint to have been trained without the
    /// contrastive auxiliary (`--no-contrastive-teacher`).
    pub require_plain_teacher: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            alpha_fd: 0.25,
            beta_pd: 0.75,
            n_envs: 2,
            total_steps: 1_000_000,
            lr0: 2e-4,
            nsteps: 256,
            nepochs: 2,
            nminibatch: 2,
            max_grad_norm: 0.5,
            laser_fusion: true,
            init_from_teacher: false,
            teacher_driven_collect: false,
            require_plain_teacher: false,
        }
    }
}
