//! Static world geometry: scenes, occupancy grids, lidar raycasting and
//! egocentric map crops.
//!
//! Everything in this module is immutable after construction and safe to
//! share across threads.

mod ego;
mod grid;
mod scene;

pub use ego::{crop_egocentric, EgoMap, CH_FOOTPRINT, CH_GOAL, CH_OCCUPANCY, EGO_CHANNELS};
pub use grid::{check_collision, rasterize, raycast, scan, OccupancyGrid};
pub use scene::{load_scene, Rect, Scene, SceneError, SCENE_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Robot pose in world coordinates. `yaw` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        ((self.x - x).powi(2) + (self.y - y).powi(2)).sqrt()
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid can return exactly 2*pi when `a` is a tiny negative number.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Errors raised by grid queries.
#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("ray origin ({x:.3}, {y:.3}) is outside the grid bounds")]
    OriginOutsideGrid { x: f64, y: f64 },
    #[error("scan needs at least one ray")]
    NoRays,
    #[error("robot radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("window extent must be positive, got {0}")]
    BadWindow(f64),
}
