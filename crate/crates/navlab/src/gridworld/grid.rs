use super::{GridError, Pose, Scene};

/// Rasterized world. Cell `(ix, iy)` covers
/// `[ix*res, (ix+1)*res) x [iy*res, (iy+1)*res)`; its center sits at
/// `((ix+0.5)*res, (iy+0.5)*res)`. Values are occupancy in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    cells: Vec<f32>,
}

impl OccupancyGrid {
    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    #[inline]
    pub fn value(&self, ix: usize, iy: usize) -> f32 {
        self.cells[iy * self.width + ix]
    }

    #[inline]
    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.value(ix, iy) > 0.5
    }

    /// Occupancy sample at a world point; out-of-bounds reads as occupied.
    #[inline]
    pub fn sample_world(&self, x: f64, y: f64) -> f32 {
        if x < 0.0 || y < 0.0 {
            return 1.0;
        }
        let ix = (x / self.resolution) as usize;
        let iy = (y / self.resolution) as usize;
        if ix >= self.width || iy >= self.height {
            return 1.0;
        }
        self.value(ix, iy)
    }

    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0
            && y >= 0.0
            && x < self.width as f64 * self.resolution
            && y < self.height as f64 * self.resolution
    }

    pub fn physical_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }
}

/// Rasterize a scene: a cell is occupied iff its center lies inside an
/// obstacle rectangle or inside the one-cell boundary wall that closes the
/// scene.
pub fn rasterize(scene: &Scene, resolution: f64) -> Result<OccupancyGrid, GridError> {
    if !(resolution > 0.0) {
        return Err(GridError::BadResolution(resolution));
    }
    let (ew, eh) = scene.extent;
    let width = (ew / resolution).round().max(1.0) as usize;
    let height = (eh / resolution).round().max(1.0) as usize;
    let wall = resolution;
    let phys_w = width as f64 * resolution;
    let phys_h = height as f64 * resolution;
    let mut cells = vec![0.0f32; width * height];
    for iy in 0..height {
        let cy = (iy as f64 + 0.5) * resolution;
        for ix in 0..width {
            let cx = (ix as f64 + 0.5) * resolution;
            let in_wall = cx < wall || cy < wall || cx > phys_w - wall || cy > phys_h - wall;
            if in_wall || scene.point_in_obstacle(cx, cy) {
                cells[iy * width + ix] = 1.0;
            }
        }
    }
    Ok(OccupancyGrid {
        resolution,
        width,
        height,
        cells,
    })
}

/// Distance along `yaw + angle_offset` to the first occupied cell, walked
/// cell-by-cell (Amanatides-Woo), clamped to `max_range` when nothing is hit.
pub fn raycast(
    grid: &OccupancyGrid,
    origin: &Pose,
    angle_offset: f64,
    max_range: f64,
) -> Result<f64, GridError> {
    if !grid.in_bounds(origin.x, origin.y) {
        return Err(GridError::OriginOutsideGrid {
            x: origin.x,
            y: origin.y,
        });
    }
    let res = grid.resolution;
    let mut ix = (origin.x / res) as isize;
    let mut iy = (origin.y / res) as isize;
    if grid.is_occupied(ix as usize, iy as usize) {
        return Ok(0.0);
    }
    let theta = origin.yaw + angle_offset;
    let dx = theta.cos();
    let dy = theta.sin();

    let (step_x, mut t_max_x, t_delta_x) = axis_setup(origin.x, dx, ix, res);
    let (step_y, mut t_max_y, t_delta_y) = axis_setup(origin.y, dy, iy, res);

    loop {
        // Advance to the next cell boundary crossing.
        let t;
        if t_max_x < t_max_y {
            t = t_max_x;
            t_max_x += t_delta_x;
            ix += step_x;
        } else {
            t = t_max_y;
            t_max_y += t_delta_y;
            iy += step_y;
        }
        if t > max_range {
            return Ok(max_range);
        }
        if ix < 0 || iy < 0 || ix as usize >= grid.width || iy as usize >= grid.height {
            // Ray left the grid without hitting anything (possible when the
            // border wall is breached by a degenerate scene); treat as clamp.
            return Ok(max_range.min(t));
        }
        if grid.is_occupied(ix as usize, iy as usize) {
            return Ok(t);
        }
    }
}

fn axis_setup(pos: f64, dir: f64, idx: isize, res: f64) -> (isize, f64, f64) {
    if dir > 1e-12 {
        let next = (idx as f64 + 1.0) * res;
        (1, (next - pos) / dir, res / dir)
    } else if dir < -1e-12 {
        let prev = idx as f64 * res;
        (-1, (pos - prev) / -dir, res / -dir)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

/// A full lidar sweep: `n_rays` rays spanning `fov` centered on the robot's
/// heading, each range normalized by `max_range` into `[0, 1]`.
pub fn scan(
    grid: &OccupancyGrid,
    origin: &Pose,
    n_rays: usize,
    fov: f64,
    max_range: f64,
) -> Result<Vec<f64>, GridError> {
    if n_rays == 0 {
        return Err(GridError::NoRays);
    }
    let mut out = Vec::with_capacity(n_rays);
    for k in 0..n_rays {
        let offset = if n_rays == 1 {
            0.0
        } else {
            -fov / 2.0 + k as f64 * fov / (n_rays as f64 - 1.0)
        };
        let d = raycast(grid, origin, offset, max_range)?;
        out.push(d / max_range);
    }
    Ok(out)
}

/// True iff any occupied cell center lies strictly within `robot_radius` of
/// the pose.
pub fn check_collision(
    grid: &OccupancyGrid,
    pose: &Pose,
    robot_radius: f64,
) -> Result<bool, GridError> {
    if !(robot_radius > 0.0) {
        return Err(GridError::BadRadius(robot_radius));
    }
    let res = grid.resolution;
    let r2 = robot_radius * robot_radius;
    let ix_lo = (((pose.x - robot_radius) / res).floor().max(0.0)) as usize;
    let iy_lo = (((pose.y - robot_radius) / res).floor().max(0.0)) as usize;
    let ix_hi = (((pose.x + robot_radius) / res).ceil() as isize).min(grid.width as isize - 1);
    let iy_hi = (((pose.y + robot_radius) / res).ceil() as isize).min(grid.height as isize - 1);
    if ix_hi < 0 || iy_hi < 0 {
        return Ok(false);
    }
    for iy in iy_lo..=(iy_hi as usize) {
        let cy = (iy as f64 + 0.5) * res;
        for ix in ix_lo..=(ix_hi as usize) {
            if !grid.is_occupied(ix, iy) {
                continue;
            }
            let cx = (ix as f64 + 0.5) * res;
            let d2 = (cx - pose.x).powi(2) + (cy - pose.y).powi(2);
            if d2 < r2 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}
