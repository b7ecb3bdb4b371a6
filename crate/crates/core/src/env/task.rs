use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arm::{distance, Point};
use super::reward::{reward_obstacle_task, reward_reach};
use super::EnvError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    TrajSinusoid,
    TrajCircle,
    TrajSpiral,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Reach, TaskKind::TrajSinusoid, TaskKind::TrajCircle, TaskKind::TrajSpiral];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::TrajSinusoid => "traj_sinusoid",
            TaskKind::TrajCircle => "traj_circle",
            TaskKind::TrajSpiral => "traj_spiral",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TaskKind::Reach => 0,
            TaskKind::TrajSinusoid => 1,
            TaskKind::TrajCircle => 2,
            TaskKind::TrajSpiral => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, EnvError> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| EnvError::UnknownTask(format!("code {code}")))
    }

    pub fn is_trajectory(self) -> bool {
        self != TaskKind::Reach
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            EnvError::UnknownTask(format!("`{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Raised annulus around the base, in fractions of the arm reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub r_min: f64,
    pub r_max: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for GoalRegion {
    fn default() -> Self {
        Self {
            r_min: 0.4,
            r_max: 0.9,
            h_min: 0.05,
            h_max: 0.35,
        }
    }
}

/// Obstacle offsets relative to the goal: uniform height above it and
/// uniform horizontal jitter per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePlacement {
    pub height_min: f64,
    pub height_max: f64,
    pub jitter: f64,
    /// Forces the `y` offset to zero for arms confined to the `x–z` plane.
    pub planar: bool,
}

impl Default for ObstaclePlacement {
    fn default() -> Self {
        Self {
            height_min: 0.1,
            height_max: 0.2,
            jitter: 0.05,
            planar: false,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl ObstaclePlacement {
    pub fn sample_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let dx = uniform(rng, -self.jitter, self.jitter);
        let dy = uniform(rng, -self.jitter, self.jitter);
        let dz = uniform(rng, self.height_min, self.height_max);
        [dx, if self.planar { 0.0 } else { dy }, dz]
    }

    pub fn sample_offsets<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Point> {
        (0..count).map(|_| self.sample_offset(rng)).collect()
    }
}

/// Shape parameters of the moving-goal tasks. Periods are in steps,
/// lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Horizontal distance of the trajectory center from the base, as reach fractions.
    pub center_r_min: f64,
    pub center_r_max: f64,
    pub center_h_min: f64,
    pub center_h_max: f64,
    pub sinusoid_period: f64,
    pub sinusoid_amp_min: f64,
    pub sinusoid_amp_max: f64,
    pub circle_period: f64,
    pub circle_radius_min: f64,
    pub circle_radius_max: f64,
    pub circle_radius_step: f64,
    pub spiral_period: f64,
    pub spiral_half_height: f64,
    pub spiral_amp_min: f64,
    pub spiral_amp_max: f64,
    pub spiral_amp_step: f64,
    pub spiral_bob: f64,
    /// Small circle each obstacle draws around its own anchor.
    pub obstacle_orbit_radius: f64,
    pub obstacle_orbit_period: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            center_r_min: 0.45,
            center_r_max: 0.65,
            center_h_min: 0.12,
            center_h_max: 0.25,
            sinusoid_period: 24.0,
            sinusoid_amp_min: 0.01,
            sinusoid_amp_max: 0.02,
            circle_period: 36.0,
            circle_radius_min: 0.06,
            circle_radius_max: 0.1,
            circle_radius_step: 0.02,
            spiral_period: 24.0,
            spiral_half_height: 0.04,
            spiral_amp_min: 0.04,
            spiral_amp_max: 0.07,
            spiral_amp_step: 0.02,
            spiral_bob: 0.02,
            obstacle_orbit_radius: 0.02,
            obstacle_orbit_period: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub goal_threshold: f64,
    pub obstacle_threshold: f64,
    pub obstacle_count: usize,
    /// Goal and obstacles move only at step indices divisible by this.
    pub update_period: usize,
    pub episode_len: usize,
    /// Multiplies every joint gain; `0.5` halves the motion per action.
    pub gain_scale: f64,
    pub goal_region: GoalRegion,
    pub obstacles: ObstaclePlacement,
    pub trajectory: TrajectoryConfig,
}

pub const DEFAULT_EPISODE_LEN: usize = 50;

impl TaskSpec {
    pub fn reach() -> Self {
        Self {
            kind: TaskKind::Reach,
            goal_threshold: 0.1,
            obstacle_threshold: 0.05,
            obstacle_count: 0,
            update_period: 1,
            episode_len: DEFAULT_EPISODE_LEN,
            gain_scale: 1.0,
            goal_region: GoalRegion::default(),
            obstacles: ObstaclePlacement::default(),
            trajectory: TrajectoryConfig::default(),
        }
    }

    /// Moving goal with three obstacles, repositioned every `⌈k/2⌉` steps.
    pub fn trajectory(kind: TaskKind, k: usize) -> Self {
        Self {
            kind,
            goal_threshold: 0.09,
            obstacle_count: 3,
            update_period: k.div_ceil(2).max(1),
            gain_scale: 0.5,
            ..Self::reach()
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Reach => Self::reach(),
            _ => Self::trajectory(kind, 6),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.goal_threshold > 0.0) || !(self.obstacle_threshold > 0.0) {
            return Err(EnvError::Config("thresholds must be positive".into()));
        }
        if self.update_period == 0 {
            return Err(EnvError::Config("update period must be at least 1".into()));
        }
        if self.episode_len < 2 {
            return Err(EnvError::Config("episodes need at least 2 steps".into()));
        }
        if !(self.gain_scale > 0.0) {
            return Err(EnvError::Config("gain scale must be positive".into()));
        }
        let g = &self.goal_region;
        if !(0.0 <= g.r_min && g.r_min <= g.r_max && 0.0 <= g.h_min && g.h_min <= g.h_max && g.h_max < g.r_min) {
            return Err(EnvError::Config("goal region must satisfy 0 ≤ h_min ≤ h_max < r_min ≤ r_max".into()));
        }
        let o = &self.obstacles;
        if !(o.height_min > 0.0 && o.height_min <= o.height_max && o.jitter >= 0.0) {
            return Err(EnvError::Config("obstacles must sit above the goal".into()));
        }
        if self.kind == TaskKind::Reach && self.obstacle_count != 0 {
            return Err(EnvError::Config("the reaching task has no obstacles".into()));
        }
        Ok(())
    }

    pub fn has_obstacles(&self) -> bool {
        self.obstacle_count > 0
    }

    /// Length of the goal vector: `G+` followed by every `G−` point.
    pub fn goal_dim(&self) -> usize {
        3 * (1 + self.obstacle_count)
    }

    /// Task reward of an achieved goal against a full goal vector.
    pub fn reward(&self, goal: &[f64], achieved: &[f64]) -> Result<f64, EnvError> {
        if goal.len() != self.goal_dim() || achieved.len() != 3 {
            return Err(EnvError::GoalDim {
                expected: self.goal_dim(),
                got: goal.len(),
            });
        }
        let d_goal = distance(&goal[..3], achieved);
        if !self.has_obstacles() {
            return Ok(reward_reach(d_goal, self.goal_threshold));
        }
        let obstacle_distances: Vec<f64> = goal[3..].chunks(3).map(|o| distance(o, achieved)).collect();
        Ok(reward_obstacle_task(d_goal, &obstacle_distances, self.goal_threshold, self.obstacle_threshold))
    }

    /// Reaching task: samples the raised annulus. `planar` restricts the
    /// azimuth to the `±x` directions.
    pub fn sample_reach_goal<R: Rng + ?Sized>(&self, reach: f64, planar: bool, rng: &mut R) -> Point {
        let g = &self.goal_region;
        let r = reach * uniform(rng, g.r_min, g.r_max);
        let h = reach * uniform(rng, g.h_min, g.h_max);
        horizontal_point(r, h, sample_azimuth(planar, rng))
    }

    /// Draws the per-episode parameters of a trajectory task.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, reach: f64, planar: bool, rng: &mut R) -> Result<TrajectoryParams, EnvError> {
        if !self.kind.is_trajectory() {
            return Err(EnvError::UnknownTask(format!("{} has no trajectory", self.kind)));
        }
        let c = &self.trajectory;
        let azimuth = sample_azimuth(planar, rng);
        let r = reach * uniform(rng, c.center_r_min, c.center_r_max);
        let h = reach * uniform(rng, c.center_h_min, c.center_h_max);
        let center = [r * azimuth.cos(), r * azimuth.sin(), h];
        let (amp_lo, amp_hi) = match self.kind {
            TaskKind::TrajSinusoid => (c.sinusoid_amp_min, c.sinusoid_amp_max),
            TaskKind::TrajCircle => (c.circle_radius_min, c.circle_radius_max),
            _ => (c.spiral_amp_min, c.spiral_amp_max),
        };
        let amplitude = uniform(rng, amp_lo, amp_hi);
        let offsets = self.obstacles.sample_offsets(self.obstacle_count, rng);
        let phases = (0..self.obstacle_count).map(|_| uniform(rng, 0.0, TAU)).collect();
        Ok(TrajectoryParams {
            center,
            heading: azimuth,
            amplitude,
            obstacle_offsets: offsets,
            obstacle_phases: phases,
            planar,
        })
    }
}

fn sample_azimuth<R: Rng + ?Sized>(planar: bool, rng: &mut R) -> f64 {
    if planar {
        if rng.random_bool(0.5) {
            0.0
        } else {
            std::f64::consts::PI
        }
    } else {
        uniform(rng, 0.0, TAU)
    }
}

fn horizontal_point(r: f64, h: f64, azimuth: f64) -> Point {
    let horizontal = (r * r - h * h).max(0.0).sqrt();
    [horizontal * azimuth.cos(), horizontal * azimuth.sin(), h]
}

/// Per-episode draw of a trajectory task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub center: Point,
    /// Azimuth of the center; the horizontal reference axis points this way.
    pub heading: f64,
    /// Sinusoid amplitude, initial circle radius, or initial spiral radius.
    pub amplitude: f64,
    pub obstacle_offsets: Vec<Point>,
    pub obstacle_phases: Vec<f64>,
    pub planar: bool,
}

/// Goal and obstacle positions at (continuous) step `t`.
pub fn trajectory_position(kind: TaskKind, t: f64, cfg: &TrajectoryConfig, p: &TrajectoryParams) -> Result<(Point, Vec<Point>), EnvError> {
    // horizontal frame: `u` along the heading, `v` perpendicular
    let (su, cu) = p.heading.sin_cos();
    let horizontal = |a: f64, b: f64| -> [f64; 2] {
        let b = if p.planar { 0.0 } else { b };
        [a * cu - b * su, a * su + b * cu]
    };
    let at = |du: f64, dv: f64, dz: f64| -> Point {
        let [x, y] = horizontal(du, dv);
        [p.center[0] + x, p.center[1] + y, p.center[2] + dz]
    };
    let orbit = |k: usize| -> Point {
        let a = TAU * t / cfg.obstacle_orbit_period + p.obstacle_phases[k];
        let [x, y] = horizontal(cfg.obstacle_orbit_radius * a.cos(), cfg.obstacle_orbit_radius * a.sin());
        [x, y, 0.0]
    };
    let (goal, obstacle_dz) = match kind {
        TaskKind::TrajSinusoid => {
            let s = p.amplitude * (TAU * t / cfg.sinusoid_period).sin();
            (at(0.0, 0.0, s), -s)
        }
        TaskKind::TrajCircle => {
            let laps = (t / cfg.circle_period).floor();
            let radius = p.amplitude + laps * cfg.circle_radius_step;
            let theta = TAU * (t / cfg.circle_period - laps);
            (at(radius * theta.cos(), radius * theta.sin(), 0.0), 0.0)
        }
        TaskKind::TrajSpiral => {
            let passes = (t / cfg.spiral_period).floor();
            let u = t / cfg.spiral_period - passes;
            let radius = p.amplitude + passes * cfg.spiral_amp_step;
            let h = cfg.spiral_half_height;
            // upward passes turn forward, downward passes retrace backward
            let (z, theta) = if passes as i64 % 2 == 0 {
                (-h + 2.0 * h * u, TAU * u)
            } else {
                (h - 2.0 * h * u, -TAU * u)
            };
            let bob = cfg.spiral_bob * (TAU * t / cfg.obstacle_orbit_period).sin();
            (at(radius * theta.cos(), radius * theta.sin(), z), bob)
        }
        TaskKind::Reach => return Err(EnvError::UnknownTask("reach has no trajectory".into())),
    };
    let obstacles = p
        .obstacle_offsets
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let w = orbit(k);
            // sinusoid obstacles hang off the center and mirror the goal
            let base = if kind == TaskKind::TrajSinusoid { p.center } else { goal };
            [base[0] + o[0] + w[0], base[1] + o[1] + w[1], base[2] + o[2] + obstacle_dz]
        })
        .collect();
    Ok((goal, obstacles))
}
