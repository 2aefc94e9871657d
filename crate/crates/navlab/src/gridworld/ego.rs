use super::{GridError, OccupancyGrid, Pose};
use ndarray::Array3;

pub const EGO_CHANNELS: usize = 3;
/// Channel 0: occupancy sampled from the global grid (out-of-bounds = 1).
pub const CH_OCCUPANCY: usize = 0;
/// Channel 1: Gaussian blob at the active goal when it falls inside the
/// window, zeros otherwise.
pub const CH_GOAL: usize = 1;
/// Channel 2: robot footprint disk at the window center.
pub const CH_FOOTPRINT: usize = 2;

/// Robot-centered, heading-aligned crop of the global grid. The robot's
/// heading points along the window's +x (column) axis. Values are `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoMap {
    /// `(channel, row, col)`; rows advance along the robot's left (+y) axis.
    pub values: Array3<f32>,
    pub window_extent: f64,
    pub resolution: f64,
}

impl EgoMap {
    pub fn side(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Width of the goal blob, in meters.
pub const GOAL_BLOB_SIGMA: f64 = 0.15;

/// Crop a square, heading-aligned egocentric window around `pose`.
///
/// Occupancy is sampled nearest-neighbor from the grid; samples outside the
/// grid read as occupied. `active_goal` indexes into `goals`; `None` (or an
/// exhausted index) leaves the goal channel empty.
pub fn crop_egocentric(
    grid: &OccupancyGrid,
    pose: &Pose,
    window_extent: f64,
    goals: &[(f64, f64)],
    active_goal: Option<usize>,
    robot_radius: f64,
) -> Result<EgoMap, GridError> {
    if !(window_extent > 0.0) {
        return Err(GridError::BadWindow(window_extent));
    }
    let res = grid.resolution;
    let side = (window_extent / res).round().max(1.0) as usize;
    let half = window_extent / 2.0;
    let (sin, cos) = pose.yaw.sin_cos();

    let mut values = Array3::<f32>::zeros((EGO_CHANNELS, side, side));

    // Active goal in the robot frame, if it falls inside the window.
    let goal_local = active_goal
        .and_then(|i| goals.get(i))
        .map(|&(gx, gy)| {
            let dx = gx - pose.x;
            let dy = gy - pose.y;
            // Rotate world offset into the robot frame.
            (cos * dx + sin * dy, -sin * dx + cos * dy)
        })
        .filter(|&(u, v)| u.abs() <= half && v.abs() <= half);

    let r2 = robot_radius * robot_radius;
    let two_sigma2 = 2.0 * GOAL_BLOB_SIGMA * GOAL_BLOB_SIGMA;

    for i in 0..side {
        let v = (i as f64 + 0.5) * res - half; // robot-left axis
        for j in 0..side {
            let u = (j as f64 + 0.5) * res - half; // robot-forward axis
            let wx = pose.x + u * cos - v * sin;
            let wy = pose.y + u * sin + v * cos;
            values[(CH_OCCUPANCY, i, j)] = grid.sample_world(wx, wy);
            if let Some((gu, gv)) = goal_local {
                let d2 = (u - gu).powi(2) + (v - gv).powi(2);
                values[(CH_GOAL, i, j)] = (-d2 / two_sigma2).exp() as f32;
            }
            if u * u + v * v <= r2 {
                values[(CH_FOOTPRINT, i, j)] = 1.0;
            }
        }
    }

    Ok(EgoMap {
        values,
        window_extent,
        resolution: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{rasterize, Rect, Scene};
    use std::f64::consts::FRAC_PI_2;

    fn scene_grid() -> OccupancyGrid {
        let scene = Scene::new(
            "ego",
            (8.08, 4.48),
            vec![
                Rect::new(2.0, 1.0, 0.4, 0.6),
                Rect::new(5.0, 2.5, 0.8, 0.3),
            ],
            Rect::new(0.3, 0.3, 7.0, 3.8),
            2,
        )
        .unwrap();
        rasterize(&scene, 0.04).unwrap()
    }

    #[test]
    fn yaw_zero_crop_equals_direct_indexing() {
        let grid = scene_grid();
        // Cell-aligned pose: window corner lands exactly on cell boundaries.
        let pose = Pose::new(101.0 * 0.04, 56.0 * 0.04, 0.0);
        let ego = crop_egocentric(&grid, &pose, 2.56, &[], None, 0.18).unwrap();
        assert_eq!(ego.side(), 64);
        let ix0 = 101 - 32;
        let iy0 = 56 - 32;
        for i in 0..64 {
            for j in 0..64 {
                let direct = grid.value((ix0 + j) as usize, (iy0 + i) as usize);
                assert_eq!(ego.values[(CH_OCCUPANCY, i, j)], direct, "({i},{j})");
            }
        }
    }

    #[test]
    fn quarter_turn_crop_is_rotated_crop() {
        let grid = scene_grid();
        let pose0 = Pose::new(101.0 * 0.04, 56.0 * 0.04, 0.0);
        let pose90 = Pose::new(pose0.x, pose0.y, FRAC_PI_2);
        let a = crop_egocentric(&grid, &pose0, 2.56, &[], None, 0.18).unwrap();
        let b = crop_egocentric(&grid, &pose90, 2.56, &[], None, 0.18).unwrap();
        let n = a.side();
        // Rotation oracle: crop_90[i][j] samples the same world point as
        // crop_0[j][n-1-i] (nearest-neighbor sampling commutes with the
        // quarter-turn index map).
        for i in 0..n {
            for j in 0..n {
                assert_eq!(
                    b.values[(CH_OCCUPANCY, i, j)],
                    a.values[(CH_OCCUPANCY, j, n - 1 - i)],
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn corner_pose_fills_out_of_bounds_occupied() {
        let grid = scene_grid();
        let pose = Pose::new(0.1, 0.1, 0.0);
        let ego = crop_egocentric(&grid, &pose, 2.56, &[], None, 0.18).unwrap();
        // The window's lower-left quadrant hangs outside the grid.
        assert_eq!(ego.values[(CH_OCCUPANCY, 0, 0)], 1.0);
        let n = ego.side();
        // Far corner is inside the room and free.
        assert_eq!(ego.values[(CH_OCCUPANCY, n - 1, n - 1)], 0.0);
    }

    #[test]
    fn goal_channel_peaks_at_goal() {
        let grid = scene_grid();
        let pose = Pose::new(4.0, 2.24, 0.0);
        let goals = vec![(4.5, 2.24), (7.0, 4.0)];
        let ego = crop_egocentric(&grid, &pose, 2.56, &goals, Some(0), 0.18).unwrap();
        let (mut best, mut best_ij) = (-1.0f32, (0usize, 0usize));
        for i in 0..ego.side() {
            for j in 0..ego.side() {
                if ego.values[(CH_GOAL, i, j)] > best {
                    best = ego.values[(CH_GOAL, i, j)];
                    best_ij = (i, j);
                }
            }
        }
        // The goal sits 0.5 m ahead: column ~ (0.5 + 1.28)/0.04 - 0.5.
        assert!(best > 0.9);
        assert_eq!(best_ij.0, 31);
        assert!((best_ij.1 as i64 - 44).unsigned_abs() <= 1, "{best_ij:?}");
    }

    #[test]
    fn goal_outside_window_leaves_channel_empty() {
        let grid = scene_grid();
        let pose = Pose::new(1.0, 1.0, 0.0);
        let goals = vec![(7.0, 4.0)];
        let ego = crop_egocentric(&grid, &pose, 2.56, &goals, Some(0), 0.18).unwrap();
        assert!(ego.values.slice(ndarray::s![CH_GOAL, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn footprint_is_centered_disk() {
        let grid = scene_grid();
        let pose = Pose::new(4.0, 2.24, 1.1);
        let ego = crop_egocentric(&grid, &pose, 2.56, &[], None, 0.18).unwrap();
        let n = ego.side();
        let c = (n / 2) as i64;
        for i in 0..n {
            for j in 0..n {
                let v = ego.values[(CH_FOOTPRINT, i, j)];
                let near = (i as i64 - c).abs() <= 5 && (j as i64 - c).abs() <= 5;
                if !near {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(ego.values[(CH_FOOTPRINT, n / 2, n / 2)], 1.0);
    }

    #[test]
    fn zero_window_rejected() {
        let grid = scene_grid();
        assert!(matches!(
            crop_egocentric(&grid, &Pose::new(1.0, 1.0, 0.0), 0.0, &[], None, 0.18),
            Err(GridError::BadWindow(_))
        ));
    }
}
