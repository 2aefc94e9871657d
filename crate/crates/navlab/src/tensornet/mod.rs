//! Minimal reverse-mode autodiff over dense arrays, plus the optimizer and
//! persistence machinery the networks need: Adam with bias correction, EMA
//! parameter tracking, a linear learning-rate schedule, and binary
//! checkpoints.
//!
//! A [`Graph`] is a one-shot tape: build a forward pass, call
//! [`Graph::backward_into`] on a scalar loss, and gradients accumulate into
//! the bound [`ParamSet`]. Graphs are cheap; training code builds one per
//! loss evaluation. Element type is generic: `f64` for tight gradient-check
//! tolerances in tests, `f32` for training speed.

mod checkpoint;
mod conv;
mod graph;
mod init;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_raw, save_checkpoint, CheckpointError, CheckpointMeta, MetaValue};
pub use graph::{Graph, Tensor};
pub use init::{fan_in_uniform, zeros};
pub use params::{AdamConfig, Param, ParamSet};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// Storage precision of a checkpoint / parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element type for tensors: `f32` or `f64`.
pub trait Elem:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum<Self>
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_bits_u64(self) -> u64;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensors belong to different graphs")]
    GraphMismatch,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("parameter structures differ: {0}")]
    StructureMismatch(String),
    #[error("no gradients accumulated since the last optimizer step")]
    MissingGradient,
    #[error("{0}")]
    Invalid(String),
}

/// Linearly decayed learning rate: `lr0 * (1 - step/total)`, clamped at 0.
pub fn linear_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * (1.0 - frac)
}

/// EMA update: `target <- momentum * target + (1 - momentum) * source`.
/// Both sets must have identical names and shapes; `source` is never
/// mutated.
pub fn ema_update<E: Elem>(
    target: &mut ParamSet<E>,
    source: &ParamSet<E>,
    momentum: f64,
) -> Result<(), TensorError> {
    target.ema_from(source, momentum)
}
