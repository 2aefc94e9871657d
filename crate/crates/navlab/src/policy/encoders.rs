//! Forward builders for the network pieces. Each builder reads its weights
//! from a [`ParamSet`] by prefix; `tracked` decides whether gradients flow.

use super::NetSpec;
use crate::tensornet::{fan_in_uniform, zeros, Elem, Graph, ParamSet, Tensor, TensorError};
use rand::Rng;

fn p<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    name: &str,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    if tracked {
        g.param(ps, name)
    } else {
        g.frozen_param(ps, name)
    }
}

/// `x (n, in) -> (n, out)` through `{prefix}.w` and `{prefix}.b`.
pub fn linear_layer<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    prefix: &str,
    x: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let w = p(g, ps, &format!("{prefix}.w"), tracked)?;
    let b = p(g, ps, &format!("{prefix}.b"), tracked)?;
    x.matmul(w)?.add_rowvec(b)
}

pub fn init_linear<E: Elem, R: Rng>(
    ps: &mut ParamSet<E>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    ps.add(
        &format!("{prefix}.w"),
        fan_in_uniform(&[fan_in, fan_out], fan_in, rng),
    )?;
    ps.add(&format!("{prefix}.b"), zeros(&[fan_out]))
}

fn init_conv<E: Elem, R: Rng>(
    ps: &mut ParamSet<E>,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    ps.add(
        &format!("{prefix}.w"),
        fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng),
    )?;
    ps.add(&format!("{prefix}.b"), zeros(&[cout]))
}

/// Three conv+relu stages and a linear projection to the map feature `z`.
/// Input `(n, c, s, s)`, output `(n, feat_map)`.
pub fn map_encoder<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    spec: &NetSpec,
    prefix: &str,
    x: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let mut h = x;
    for i in 0..3 {
        let k = spec.conv_kernels[i];
        let w = p(g, ps, &format!("{prefix}.conv{}.w", i + 1), tracked)?;
        let b = p(g, ps, &format!("{prefix}.conv{}.b", i + 1), tracked)?;
        h = h.conv2d(w, b, spec.conv_strides[i], k / 2)?.relu();
    }
    let n = h.shape()[0];
    let flat = h.reshape(&[n, spec.conv_flat()])?;
    linear_layer(g, ps, &format!("{prefix}.proj"), flat, tracked)
}

pub fn init_map_encoder<E: Elem, R: Rng>(
    ps: &mut ParamSet<E>,
    spec: &NetSpec,
    prefix: &str,
    rng: &mut R,
) -> Result<(), TensorError> {
    let chans = [
        spec.map_channels,
        spec.conv_channels[0],
        spec.conv_channels[1],
    ];
    for i in 0..3 {
        init_conv(
            ps,
            &format!("{prefix}.conv{}", i + 1),
            spec.conv_channels[i],
            chans[i],
            spec.conv_kernels[i],
            rng,
        )?;
    }
    init_linear(ps, &format!("{prefix}.proj"), spec.conv_flat(), spec.feat_map, rng)
}

/// Two fully-connected layers with a relu between: laser `(n, laser_dim)`
/// to feature `q (n, feat_laser)`.
pub fn laser_encoder<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    prefix: &str,
    x: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let h = linear_layer(g, ps, &format!("{prefix}.fc1"), x, tracked)?.relu();
    linear_layer(g, ps, &format!("{prefix}.fc2"), h, tracked)
}

pub fn init_laser_encoder<E: Elem, R: Rng>(
    ps: &mut ParamSet<E>,
    spec: &NetSpec,
    prefix: &str,
    rng: &mut R,
) -> Result<(), TensorError> {
    init_linear(ps, &format!("{prefix}.fc1"), spec.laser_dim, spec.laser_hidden, rng)?;
    init_linear(ps, &format!("{prefix}.fc2"), spec.laser_hidden, spec.feat_laser, rng)
}

/// Actor head: state `(n, in)` to action mean `(n, action_dim)`.
pub fn actor_head<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    prefix: &str,
    state: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let h = linear_layer(g, ps, &format!("{prefix}.fc1"), state, tracked)?.relu();
    linear_layer(g, ps, &format!("{prefix}.mu"), h, tracked)
}

/// Critic head: state `(n, in)` to value `(n,)`.
pub fn critic_head<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    prefix: &str,
    state: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let h = linear_layer(g, ps, &format!("{prefix}.fc1"), state, tracked)?.relu();
    let v = linear_layer(g, ps, &format!("{prefix}.v"), h, tracked)?;
    let n = v.shape()[0];
    v.reshape(&[n])
}

/// The student's fusion transform: `(n, in)` (either `concat(z_hat, q_hat)`
/// or `z_hat` alone) to `(n, feat_map)` through two fully-connected layers.
pub fn transform_module<'g, E: Elem>(
    g: &'g Graph<E>,
    ps: &ParamSet<E>,
    prefix: &str,
    x: Tensor<'g, E>,
    tracked: bool,
) -> Result<Tensor<'g, E>, TensorError> {
    let h = linear_layer(g, ps, &format!("{prefix}.fc1"), x, tracked)?.relu();
    linear_layer(g, ps, &format!("{prefix}.fc2"), h, tracked)
}
