//! Network architectures: map/laser encoders, actor-critic heads, the
//! student's transform module, contrastive augmentations, and batched
//! observation assembly.

mod augment;
mod encoders;
mod nets;

pub use augment::{augment, color_jitter, random_scale, AugmentConfig};
pub use encoders::{actor_head, critic_head, laser_encoder, map_encoder, transform_module, linear_layer};
pub use nets::{
    gaussian_log_prob_arrays, pose_to_input, squash_correction, ActOutput, ActionMode,
    InputMode, ObsBatch, PolicyForward, PolicyNet, StudentForward, StudentNet,
};

use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The layer counts are fixed (3 conv + 1
/// projection for the map, 2 fully-connected for the laser, 2 for each head
/// and the transform); these fields size them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSpec {
    pub map_channels: usize,
    /// Egocentric map side length in cells.
    pub map_size: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_strides: [usize; 3],
    /// Map feature width (z).
    pub feat_map: usize,
    pub laser_dim: usize,
    pub laser_hidden: usize,
    /// Laser feature width (q).
    pub feat_laser: usize,
    pub head_hidden: usize,
    pub transform_hidden: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            map_channels: 3,
            map_size: 64,
            conv_channels: [16, 32, 32],
            conv_kernels: [5, 3, 3],
            conv_strides: [2, 2, 2],
            feat_map: 128,
            laser_dim: 60,
            laser_hidden: 128,
            feat_laser: 64,
            head_hidden: 256,
            transform_hidden: 256,
            goal_dim: 2,
            action_dim: 3,
        }
    }
}

impl NetSpec {
    /// Sized-down variant for quick desk-scale runs.
    pub fn desk_scale() -> Self {
        NetSpec {
            map_size: 32,
            conv_channels: [8, 16, 16],
            feat_map: 32,
            laser_hidden: 64,
            feat_laser: 16,
            head_hidden: 64,
            transform_hidden: 64,
            ..NetSpec::default()
        }
    }

    /// Spatial side after the three stride-`s` convolutions.
    pub fn conv_out_side(&self) -> usize {
        let mut s = self.map_size;
        for i in 0..3 {
            let k = self.conv_kernels[i];
            let pad = k / 2;
            s = (s + 2 * pad - k) / self.conv_strides[i] + 1;
        }
        s
    }

    /// Flattened width of the last conv feature map.
    pub fn conv_flat(&self) -> usize {
        self.conv_channels[2] * self.conv_out_side() * self.conv_out_side()
    }

    fn arch_string(&self) -> String {
        format!(
            "map={}x{}x{};conv={}k{}s{},{}k{}s{},{}k{}s{};z={};laser={}-{}-{};heads={};trans={};goal={};act={}",
            self.map_channels,
            self.map_size,
            self.map_size,
            self.conv_channels[0],
            self.conv_kernels[0],
            self.conv_strides[0],
            self.conv_channels[1],
            self.conv_kernels[1],
            self.conv_strides[1],
            self.conv_channels[2],
            self.conv_kernels[2],
            self.conv_strides[2],
            self.feat_map,
            self.laser_dim,
            self.laser_hidden,
            self.feat_laser,
            self.head_hidden,
            self.transform_hidden,
            self.goal_dim,
            self.action_dim,
        )
    }

    /// Architecture fingerprint embedded in checkpoints: the layer spec plus
    /// a short hash of it.
    pub fn fingerprint(&self, kind: &str) -> String {
        let s = format!("{kind}|{}", self.arch_string());
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in s.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{s}|{h:016x}")
    }
}
