//! Contrastive view augmentations for egocentric maps. These operate on raw
//! `f32` maps before encoding; no gradients flow through them.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub brightness_lo: f64,
    pub brightness_hi: f64,
    pub offset_bound: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_lo: 0.6,
            brightness_hi: 1.4,
            offset_bound: 0.2,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

/// Rescale spatial content by `scale` about the map center with
/// nearest-neighbor sampling, zero-padding / center-cropping back to the
/// original side. All channels are scaled together.
pub fn random_scale(map: &Array3<f32>, scale: f64) -> Array3<f32> {
    let (c, h, w) = map.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for i in 0..h {
        let sy = cy + (i as f64 - cy) / scale;
        let iy = sy.round();
        if iy < 0.0 || iy >= h as f64 {
            continue;
        }
        for j in 0..w {
            let sx = cx + (j as f64 - cx) / scale;
            let ix = sx.round();
            if ix < 0.0 || ix >= w as f64 {
                continue;
            }
            for ch in 0..c {
                out[(ch, i, j)] = map[(ch, iy as usize, ix as usize)];
            }
        }
    }
    out
}

/// Multiplicative brightness plus additive offset on the occupancy channel
/// (channel 0) only, clipped back into `[0, 1]`. Other channels pass
/// through untouched.
pub fn color_jitter(map: &Array3<f32>, factor: f64, offset: f64) -> Array3<f32> {
    let mut out = map.clone();
    let (f, o) = (factor as f32, offset as f32);
    for v in out.index_axis_mut(ndarray::Axis(0), 0).iter_mut() {
        *v = (*v * f + o).clamp(0.0, 1.0);
    }
    out
}

/// One random view: random_scale then color_jitter, with parameters drawn
/// from `cfg`'s ranges.
pub fn augment<R: Rng>(map: &Array3<f32>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f32> {
    let scale = rng.gen_range(cfg.scale_lo..cfg.scale_hi);
    let factor = rng.gen_range(cfg.brightness_lo..cfg.brightness_hi);
    let offset = rng.gen_range(-cfg.offset_bound..cfg.offset_bound);
    color_jitter(&random_scale(map, scale), factor, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blob_map(side: usize) -> Array3<f32> {
        let mut m = Array3::<f32>::zeros((3, side, side));
        let c = side / 2;
        for i in c - 8..c + 8 {
            for j in c - 8..c + 8 {
                m[(0, i, j)] = 1.0;
                m[(1, i, j)] = 0.5;
            }
        }
        m
    }

    #[test]
    fn identity_parameters_are_identity() {
        let m = blob_map(64);
        let out = color_jitter(&random_scale(&m, 1.0), 1.0, 0.0);
        assert_eq!(m, out);
    }

    #[test]
    fn outputs_stay_in_range_and_shape() {
        let m = blob_map(64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = augment(&m, &AugmentConfig::default(), &mut rng);
            assert_eq!(v.dim(), (3, 64, 64));
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn shrink_scales_blob_area() {
        let m = blob_map(64);
        let shrunk = random_scale(&m, 0.8);
        let before: f32 = m.index_axis(ndarray::Axis(0), 0).sum();
        let after: f32 = shrunk.index_axis(ndarray::Axis(0), 0).sum();
        let ratio = after / before;
        assert!((ratio - 0.64).abs() < 0.08, "area ratio {ratio}");
    }

    #[test]
    fn jitter_skips_goal_and_footprint_channels() {
        let m = blob_map(64);
        let out = color_jitter(&m, 0.5, 0.1);
        assert_eq!(
            m.index_axis(ndarray::Axis(0), 1),
            out.index_axis(ndarray::Axis(0), 1)
        );
        assert_ne!(
            m.index_axis(ndarray::Axis(0), 0),
            out.index_axis(ndarray::Axis(0), 0)
        );
    }

    #[test]
    fn scale_moves_all_channels_together() {
        let m = blob_map(64);
        let out = random_scale(&m, 1.2);
        // Channel 1 content scales exactly like channel 0.
        let occ = out.index_axis(ndarray::Axis(0), 0);
        let goal = out.index_axis(ndarray::Axis(0), 1);
        for (a, b) in occ.iter().zip(goal.iter()) {
            assert_eq!(*a > 0.0, *b > 0.0);
        }
    }
}
