use super::{EnvConfig, EnvError, REWARD_COLLISION, REWARD_GOAL, REWARD_STEP};
use crate::gridworld::{check_collision, crop_egocentric, rasterize, scan, EgoMap, OccupancyGrid, Pose};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What the agent sees at one step. `pose_estimate` equals the true pose in
/// clean mode and the shifted/jittered pose in noisy mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Normalized ranges in `[0, 1]`, length `lidar.n_rays`.
    pub laser: Array1<f32>,
    pub ego_map: EgoMap,
    /// Relative position of the active goal in the (estimated) robot frame,
    /// clipped to `goal_clip` meters and scaled into `[-1, 1]`.
    pub goal_vec: [f32; 2],
    pub pose_estimate: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_step: f64,
    pub r_col: f64,
    pub r_goal: f64,
    pub delta_d: f64,
}

impl RewardBreakdown {
    pub fn sum(&self) -> f64 {
        self.r_step + self.r_col + self.r_goal + self.delta_d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub goal_activated: bool,
    pub collision: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs_noisy: Observation,
    pub obs_clean: Observation,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

/// Mutable episode state.
#[derive(Debug, Clone)]
pub struct RobotState {
    pub pose: Pose,
    pub goals: Vec<(f64, f64)>,
    pub active_goal: usize,
    pub step_count: usize,
    pub collision_steps: usize,
    pub episode_shift: [f64; 3],
}

/// Per-step noise draws, refreshed after every transition so that both
/// observation modes of a step share the same draws.
#[derive(Debug, Clone)]
struct StepNoise {
    pose: [f64; 3],
    laser: Vec<f64>,
}

#[derive(Debug)]
pub struct NavEnv {
    cfg: EnvConfig,
    grid: OccupancyGrid,
    state: RobotState,
    scan_cache: Vec<f64>,
    noise_draws: StepNoise,
    done: bool,
    /// Geometry sampling stream (reset layouts).
    layout_rng: ChaCha8Rng,
    /// Noise stream, independent of layout so that layouts are comparable
    /// across noise settings at a fixed seed.
    noise_rng: ChaCha8Rng,
}

const SAMPLING_ATTEMPTS: usize = 2000;

impl NavEnv {
    /// Build an environment and reset it with `cfg.seed`.
    pub fn new(cfg: EnvConfig) -> Result<NavEnv, EnvError> {
        cfg.validate()?;
        let grid = rasterize(&cfg.scene, cfg.resolution)?;
        let mut env = NavEnv {
            state: RobotState {
                pose: Pose::new(0.0, 0.0, 0.0),
                goals: Vec::new(),
                active_goal: 0,
                step_count: 0,
                collision_steps: 0,
                episode_shift: [0.0; 3],
            },
            scan_cache: Vec::new(),
            noise_draws: StepNoise {
                pose: [0.0; 3],
                laser: Vec::new(),
            },
            done: true,
            layout_rng: ChaCha8Rng::seed_from_u64(0),
            noise_rng: ChaCha8Rng::seed_from_u64(0),
            grid,
            cfg,
        };
        let seed = env.cfg.seed;
        env.reset(Some(seed))?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Start a new episode. With `Some(seed)` both random streams are
    /// reseeded (two resets with the same seed give identical states);
    /// with `None` the streams continue, giving fresh layouts.
    pub fn reset(&mut self, seed: Option<u64>) -> Result<(Observation, Observation), EnvError> {
        if let Some(s) = seed {
            self.layout_rng = ChaCha8Rng::seed_from_u64(super::splitmix64(s));
            self.noise_rng = ChaCha8Rng::seed_from_u64(super::splitmix64(s ^ 0x6E01_51CE));
        }
        let n_points = self.cfg.scene.goal_count + 1;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(n_points);
        let mut attempts = 0;
        while points.len() < n_points {
            if attempts >= SAMPLING_ATTEMPTS {
                return Err(EnvError::SpawnSamplingFailed(attempts));
            }
            attempts += 1;
            let candidate = self.sample_point(points.is_empty());
            if check_collision(
                &self.grid,
                &Pose::new(candidate.0, candidate.1, 0.0),
                self.cfg.robot_radius,
            )? {
                continue;
            }
            let clearance = 2.0 * self.cfg.goal_radius;
            if points
                .iter()
                .any(|p| ((p.0 - candidate.0).powi(2) + (p.1 - candidate.1).powi(2)).sqrt() < clearance)
            {
                continue;
            }
            points.push(candidate);
        }
        let yaw = self.layout_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let start = points[0];
        let s = self.cfg.noise.shift_bound;
        let shift = [
            self.draw_unit_noise() * s,
            self.draw_unit_noise() * s,
            self.draw_unit_noise() * s,
        ];
        self.state = RobotState {
            pose: Pose::new(start.0, start.1, yaw),
            goals: points[1..].to_vec(),
            active_goal: 0,
            step_count: 0,
            collision_steps: 0,
            episode_shift: shift,
        };
        self.done = false;
        self.refresh_scan();
        self.draw_step_noise();
        Ok((self.observe(false), self.observe(true)))
    }

    /// Robot start comes from the spawn region; goals from the whole scene.
    fn sample_point(&mut self, robot: bool) -> (f64, f64) {
        if robot {
            let r = self.cfg.scene.spawn;
            (
                self.layout_rng.gen_range(r.x..r.x + r.w),
                self.layout_rng.gen_range(r.y..r.y + r.h),
            )
        } else {
            let (w, h) = self.cfg.scene.extent;
            let m = self.cfg.robot_radius;
            (
                self.layout_rng.gen_range(m..w - m),
                self.layout_rng.gen_range(m..h - m),
            )
        }
    }

    /// Uniform draw in [-1, 1] from the noise stream. Draws always happen so
    /// the stream stays aligned across noise settings.
    fn draw_unit_noise(&mut self) -> f64 {
        self.noise_rng.gen_range(-1.0..1.0)
    }

    fn draw_step_noise(&mut self) {
        let n = self.cfg.lidar.n_rays;
        let mut pose = [0.0; 3];
        for slot in pose.iter_mut() {
            *slot = self.draw_unit_noise();
        }
        let mut laser = Vec::with_capacity(n);
        for _ in 0..n {
            laser.push(self.draw_unit_noise());
        }
        self.noise_draws = StepNoise { pose, laser };
    }

    fn refresh_scan(&mut self) {
        self.scan_cache = scan(
            &self.grid,
            &self.state.pose,
            self.cfg.lidar.n_rays,
            self.cfg.lidar.fov_degrees.to_radians(),
            self.cfg.lidar.max_range,
        )
        .expect("pose stays inside the closed scene");
    }

    /// Advance one control step.
    pub fn step(&mut self, action: [f64; 3]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let lim = self.cfg.speed_limit;
        let vx = action[0].clamp(-lim[0], lim[0]);
        let vy = action[1].clamp(-lim[1], lim[1]);
        let om = action[2].clamp(-lim[2], lim[2]);
        let dt = self.cfg.dt;
        let p = self.state.pose;
        let (sin, cos) = p.yaw.sin_cos();
        let candidate = Pose::new(
            p.x + (vx * cos - vy * sin) * dt,
            p.y + (vx * sin + vy * cos) * dt,
            p.yaw + om * dt,
        );
        let collision = check_collision(&self.grid, &candidate, self.cfg.robot_radius)?;
        let goal = self.state.goals[self.state.active_goal.min(self.state.goals.len() - 1)];
        let d_prev = p.distance_to(goal.0, goal.1);
        if collision {
            self.state.collision_steps += 1;
        } else {
            self.state.pose = candidate;
        }
        let d_now = self.state.pose.distance_to(goal.0, goal.1);
        let delta_d = d_prev - d_now;

        let mut r_goal = 0.0;
        let mut goal_activated = false;
        if self.state.active_goal < self.state.goals.len() && d_now < self.cfg.goal_radius {
            r_goal = REWARD_GOAL;
            goal_activated = true;
            self.state.active_goal += 1;
        }
        let breakdown = RewardBreakdown {
            r_step: REWARD_STEP,
            r_col: if collision { REWARD_COLLISION } else { 0.0 },
            r_goal,
            delta_d,
        };
        let reward = breakdown.sum();

        self.state.step_count += 1;
        self.done = self.state.active_goal == self.state.goals.len()
            || self.state.step_count >= self.cfg.episode_steps;

        self.refresh_scan();
        self.draw_step_noise();
        Ok(StepResult {
            obs_noisy: self.observe(false),
            obs_clean: self.observe(true),
            reward,
            breakdown,
            done: self.done,
            info: StepInfo {
                goal_activated,
                collision,
            },
        })
    }

    /// Build the observation for the current state. Laser rays are always
    /// cast from the true pose; noisy mode adds per-ray range noise and
    /// crops the map at the estimated (shifted) pose.
    pub fn observe(&self, clean: bool) -> Observation {
        let cfg = &self.cfg;
        let st = &self.state;
        let pose_estimate = if clean {
            st.pose
        } else {
            let nm = &cfg.noise;
            let yaw_noise = if nm.yaw_step_noise {
                self.noise_draws.pose[2] * nm.pose_bound
            } else {
                0.0
            };
            Pose::new(
                st.pose.x + st.episode_shift[0] + self.noise_draws.pose[0] * nm.pose_bound,
                st.pose.y + st.episode_shift[1] + self.noise_draws.pose[1] * nm.pose_bound,
                st.pose.yaw + st.episode_shift[2] + yaw_noise,
            )
        };

        let laser: Array1<f32> = if clean {
            self.scan_cache.iter().map(|&v| v as f32).collect()
        } else {
            let b = cfg.noise.laser_bound;
            self.scan_cache
                .iter()
                .zip(&self.noise_draws.laser)
                .map(|(&v, &u)| (v + u * b).clamp(0.0, 1.0) as f32)
                .collect()
        };

        let active = if st.active_goal < st.goals.len() {
            Some(st.active_goal)
        } else {
            None
        };
        let ego_map = crop_egocentric(
            &self.grid,
            &pose_estimate,
            cfg.window_extent,
            &st.goals,
            active,
            cfg.robot_radius,
        )
        .expect("window extent validated in config");

        let goal_vec = match active {
            Some(i) => {
                let (gx, gy) = st.goals[i];
                let dx = gx - pose_estimate.x;
                let dy = gy - pose_estimate.y;
                let (sin, cos) = pose_estimate.yaw.sin_cos();
                let rel_x = (cos * dx + sin * dy).clamp(-cfg.goal_clip, cfg.goal_clip);
                let rel_y = (-sin * dx + cos * dy).clamp(-cfg.goal_clip, cfg.goal_clip);
                [(rel_x / cfg.goal_clip) as f32, (rel_y / cfg.goal_clip) as f32]
            }
            None => [0.0, 0.0],
        };

        Observation {
            laser,
            ego_map,
            goal_vec,
            pose_estimate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{normalize_angle, Scene};
    use std::f64::consts::PI;

    fn cfg_zero_noise() -> EnvConfig {
        EnvConfig {
            scene: Scene::desk(),
            resolution: 0.08,
            noise: super::super::NoiseModel::zero(),
            episode_steps: 100,
            seed: 5,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_is_deterministic_under_seed() {
        let mut a = NavEnv::new(cfg_zero_noise()).unwrap();
        let mut b = NavEnv::new(cfg_zero_noise()).unwrap();
        let (an, ac) = a.reset(Some(42)).unwrap();
        let (bn, bc) = b.reset(Some(42)).unwrap();
        assert_eq!(an, bn);
        assert_eq!(ac, bc);
        assert_eq!(a.state().goals, b.state().goals);
    }

    #[test]
    fn zero_noise_observations_identical() {
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        let (noisy, clean) = env.reset(Some(3)).unwrap();
        assert_eq!(noisy, clean);
        let r = env.step([0.5, 0.1, 0.3]).unwrap();
        assert_eq!(r.obs_noisy, r.obs_clean);
    }

    #[test]
    fn goal_count_respected() {
        let env = NavEnv::new(cfg_zero_noise()).unwrap();
        assert_eq!(env.state().goals.len(), 3);
        let full = NavEnv::new(EnvConfig {
            seed: 1,
            ..EnvConfig::default()
        })
        .unwrap();
        assert_eq!(full.state().goals.len(), 5);
    }

    #[test]
    fn action_clamped_to_speed_limit() {
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        env.reset(Some(9)).unwrap();
        let before = env.state().pose;
        let r = env.step([3.0, 3.0, 10.0]).unwrap();
        let after = env.state().pose;
        if !r.info.collision {
            let dt = env.config().dt;
            let dist = before.distance_to(after.x, after.y);
            let expect = (2.0f64.powi(2) + 2.0f64.powi(2)).sqrt() * dt;
            assert!((dist - expect).abs() < 1e-9, "moved {dist}, expected {expect}");
            let dyaw = normalize_angle(after.yaw - before.yaw);
            assert!((dyaw - PI / 4.0 * dt).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_matches_breakdown_and_constants() {
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        env.reset(Some(11)).unwrap();
        // Drive straight toward the active goal in the robot frame.
        let st = env.state().clone();
        let (gx, gy) = st.goals[0];
        let (sin, cos) = st.pose.yaw.sin_cos();
        let dx = gx - st.pose.x;
        let dy = gy - st.pose.y;
        let dist = (dx * dx + dy * dy).sqrt();
        let v = [
            (cos * dx + sin * dy) / dist,
            (-sin * dx + cos * dy) / dist,
            0.0,
        ];
        let r = env.step(v).unwrap();
        assert_eq!(r.reward, r.breakdown.sum());
        if !r.info.collision && !r.info.goal_activated {
            // Moved 1 m/s * dt straight at the goal.
            let expect = REWARD_STEP + env.config().dt;
            assert!((r.reward - expect).abs() < 1e-9, "reward {}", r.reward);
        }
    }

    #[test]
    fn wall_push_is_rejected_with_collision_penalty() {
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        env.reset(Some(2)).unwrap();
        // March into the nearest wall until a collision is reported.
        let mut hit = false;
        for _ in 0..300 {
            let p = env.state().pose;
            let (sin, cos) = p.yaw.sin_cos();
            // World-frame -x direction expressed in the robot frame.
            let v = [-cos * 2.0, sin * 2.0, 0.0];
            let before = env.state().pose;
            let r = env.step(v).unwrap();
            if r.info.collision {
                hit = true;
                assert_eq!(env.state().pose, before, "collision must reject the pose");
                assert_eq!(r.breakdown.r_col, REWARD_COLLISION);
                assert_eq!(r.breakdown.delta_d, 0.0);
                assert!((r.reward - (REWARD_STEP + REWARD_COLLISION)).abs() < 1e-12);
                break;
            }
            if r.done {
                env.reset(None).unwrap();
            }
        }
        assert!(hit, "never reached a wall");
    }

    #[test]
    fn goal_activation_grants_bonus_in_order() {
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        env.reset(Some(7)).unwrap();
        let mut activated = 0;
        let mut total_goal_reward = 0.0;
        for _ in 0..3000 {
            if env.is_done() {
                break;
            }
            let st = env.state().clone();
            let (gx, gy) = st.goals[st.active_goal.min(st.goals.len() - 1)];
            let (sin, cos) = st.pose.yaw.sin_cos();
            let dx = gx - st.pose.x;
            let dy = gy - st.pose.y;
            let n = (dx * dx + dy * dy).sqrt().max(1e-9);
            let r = env
                .step([2.0 * (cos * dx + sin * dy) / n, 2.0 * (-sin * dx + cos * dy) / n, 0.0])
                .unwrap();
            if r.info.goal_activated {
                activated += 1;
                total_goal_reward += r.breakdown.r_goal;
                assert_eq!(env.state().active_goal, activated);
            }
        }
        assert!(activated >= 1, "beeline never reached a goal");
        assert_eq!(total_goal_reward, REWARD_GOAL * activated as f64);
    }

    #[test]
    fn step_after_done_errors() {
        let mut env = NavEnv::new(EnvConfig {
            episode_steps: 2,
            scene: Scene::desk(),
            resolution: 0.08,
            seed: 1,
            ..EnvConfig::default()
        })
        .unwrap();
        env.step([0.0, 0.0, 0.0]).unwrap();
        let r = env.step([0.0, 0.0, 0.0]).unwrap();
        assert!(r.done);
        assert!(matches!(env.step([0.0, 0.0, 0.0]), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn yaw_stays_normalized_under_random_actions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut env = NavEnv::new(cfg_zero_noise()).unwrap();
        for _ in 0..500 {
            if env.is_done() {
                env.reset(None).unwrap();
            }
            let a = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-2.0..2.0),
            ];
            env.step(a).unwrap();
            let yaw = env.state().pose.yaw;
            assert!(yaw > -PI && yaw <= PI, "yaw {yaw}");
        }
    }

    #[test]
    fn noisy_pose_estimate_within_bounds() {
        let mut cfg = cfg_zero_noise();
        cfg.noise = super::super::NoiseModel {
            shift_bound: 0.5,
            pose_bound: 0.1,
            laser_bound: 0.15,
            yaw_step_noise: true,
        };
        let mut env = NavEnv::new(cfg).unwrap();
        env.reset(Some(23)).unwrap();
        let shift = env.state().episode_shift;
        for _ in 0..50 {
            let r = env.step([0.3, 0.0, 0.1]).unwrap();
            let true_pose = r.obs_clean.pose_estimate;
            let est = r.obs_noisy.pose_estimate;
            assert!((est.x - true_pose.x - shift[0]).abs() <= 0.1 + 1e-12);
            assert!((est.y - true_pose.y - shift[1]).abs() <= 0.1 + 1e-12);
            for (c, n) in r.obs_clean.laser.iter().zip(r.obs_noisy.laser.iter()) {
                assert!((n - c).abs() <= 0.15 + 1e-6);
                assert!((0.0..=1.0).contains(&f64::from(*n)));
            }
            if r.done {
                break;
            }
        }
    }
}
