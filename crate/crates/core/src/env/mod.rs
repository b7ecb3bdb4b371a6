//! Kinematic arm environment with reaching and moving-goal tasks.

mod arm;
mod protocol;
mod reward;
mod scripted;
mod server;
mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use arm::{distance, forward_kinematics, ArmKind, ArmModel, Kinematics, Point, DEFAULT_DT, DEFAULT_GAINS};
pub use protocol::{decode_frame, encode_frame, Message, MAX_FRAME_LEN, PROTOCOL_VERSION};
pub use reward::{reward_obstacle_task, reward_reach};
pub use scripted::ScriptedTracker;
pub use server::{serve_env, RemoteEnv};
pub use task::{
    trajectory_position, GoalRegion, ObstaclePlacement, TaskKind, TaskSpec, TrajectoryConfig, TrajectoryParams, DEFAULT_EPISODE_LEN,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("action has {got} entries, arm has {expected} joints")]
    ActionDim { expected: usize, got: usize },
    #[error("goal vector has {got} entries, task expects {expected}")]
    GoalDim { expected: usize, got: usize },
    #[error("action entry {index} is not finite")]
    NonFiniteAction { index: usize },
    #[error("step called before reset")]
    NotReset,
    #[error("episode already finished after {0} steps")]
    EpisodeOver(usize),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote environment error: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the environment reports after `reset` or `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Flat [`Observation`] vector.
    pub observation: Vec<f64>,
    /// `G+`, followed by every obstacle point in obstacle tasks.
    pub goal: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub done: bool,
}

pub trait Environment {
    fn reset(&mut self, seed: u64) -> Result<StepOutput, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutput, EnvError>;
}

/// Structured view of an observation vector.
///
/// Flat layout, `J` joints: joint origins (`3J`), link directions (`3J`),
/// joint angles (`J`), goal `G+` (3), end effector (3).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub joint_positions: Vec<Point>,
    pub link_directions: Vec<Point>,
    pub angles: Vec<f64>,
    pub goal: Point,
    pub end_effector: Point,
}

impl Observation {
    pub fn dim(joints: usize) -> usize {
        7 * joints + 6
    }

    /// Index of the goal inside the flat vector.
    pub fn goal_offset(joints: usize) -> usize {
        7 * joints
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dim(self.angles.len()));
        v.extend(self.joint_positions.iter().flatten());
        v.extend(self.link_directions.iter().flatten());
        v.extend(&self.angles);
        v.extend(self.goal);
        v.extend(self.end_effector);
        v
    }

    pub fn from_slice(joints: usize, v: &[f64]) -> Result<Self, EnvError> {
        if v.len() != Self::dim(joints) {
            return Err(EnvError::Protocol(format!(
                "observation has {} entries, expected {} for {joints} joints",
                v.len(),
                Self::dim(joints)
            )));
        }
        let point = |i: usize| -> Point { [v[i], v[i + 1], v[i + 2]] };
        let j = joints;
        Ok(Self {
            joint_positions: (0..j).map(|i| point(3 * i)).collect(),
            link_directions: (0..j).map(|i| point(3 * j + 3 * i)).collect(),
            angles: v[6 * j..7 * j].to_vec(),
            goal: point(7 * j),
            end_effector: point(7 * j + 3),
        })
    }

    /// Joint angles straight out of a flat observation.
    pub fn angles_of(joints: usize, v: &[f64]) -> &[f64] {
        &v[6 * joints..7 * joints]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub angles: Vec<f64>,
    pub goal: Point,
    pub obstacles: Vec<Point>,
    pub step: usize,
}

/// In-process environment. Every episode is a pure function of the reset
/// seed and the action sequence.
#[derive(Debug, Clone)]
pub struct Env {
    arm: ArmModel,
    task: TaskSpec,
    state: Option<EnvState>,
    trajectory: Option<TrajectoryParams>,
    clipped_actions: u64,
}

impl Env {
    pub fn new(arm: ArmModel, task: TaskSpec) -> Result<Self, EnvError> {
        arm.validate()?;
        task.validate()?;
        Ok(Self {
            arm,
            task,
            state: None,
            trajectory: None,
            clipped_actions: 0,
        })
    }

    pub fn arm(&self) -> &ArmModel {
        &self.arm
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn trajectory_params(&self) -> Option<&TrajectoryParams> {
        self.trajectory.as_ref()
    }

    /// Action entries clipped into `[−1, 1]` since construction.
    pub fn clipped_actions(&self) -> u64 {
        self.clipped_actions
    }

    pub fn observation_dim(&self) -> usize {
        Observation::dim(self.arm.joint_count())
    }

    /// Obstacle offset distribution as this arm actually uses it.
    pub fn obstacle_placement(&self) -> ObstaclePlacement {
        effective_placement(&self.arm, &self.task)
    }

    fn place(&self, step: usize) -> Result<(Point, Vec<Point>), EnvError> {
        let params = self.trajectory.as_ref().ok_or(EnvError::NotReset)?;
        let t = step - step % self.task.update_period;
        trajectory_position(self.task.kind, t as f64, &self.task.trajectory, params)
    }

    fn output(&self) -> Result<StepOutput, EnvError> {
        let state = self.state.as_ref().ok_or(EnvError::NotReset)?;
        let kin = forward_kinematics(&self.arm, &state.angles)?;
        let obs = Observation {
            joint_positions: kin.joint_positions,
            link_directions: kin.link_directions,
            angles: state.angles.clone(),
            goal: state.goal,
            end_effector: kin.end_effector,
        };
        let mut goal = state.goal.to_vec();
        goal.extend(state.obstacles.iter().flatten());
        Ok(StepOutput {
            observation: obs.to_vec(),
            goal,
            achieved_goal: kin.end_effector.to_vec(),
            done: state.step >= self.task.episode_len,
        })
    }
}

pub fn effective_placement(arm: &ArmModel, task: &TaskSpec) -> ObstaclePlacement {
    ObstaclePlacement {
        planar: task.obstacles.planar || arm.kind == ArmKind::Planar,
        ..task.obstacles
    }
}

impl Environment for Env {
    fn reset(&mut self, seed: u64) -> Result<StepOutput, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planar = self.arm.kind == ArmKind::Planar;
        let reach = self.arm.reach();
        let (goal, obstacles) = if self.task.kind.is_trajectory() {
            let mut task = self.task.clone();
            task.obstacles = self.obstacle_placement();
            self.trajectory = Some(task.sample_trajectory(reach, planar, &mut rng)?);
            self.place(0)?
        } else {
            self.trajectory = None;
            (self.task.sample_reach_goal(reach, planar, &mut rng), Vec::new())
        };
        self.state = Some(EnvState {
            angles: self.arm.home.clone(),
            goal,
            obstacles,
            step: 0,
        });
        self.output()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutput, EnvError> {
        let j = self.arm.joint_count();
        if action.len() != j {
            return Err(EnvError::ActionDim { expected: j, got: action.len() });
        }
        if let Some(index) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction { index });
        }
        let episode_len = self.task.episode_len;
        let scale = self.task.gain_scale * self.arm.dt;
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if state.step >= episode_len {
            return Err(EnvError::EpisodeOver(episode_len));
        }
        for ((q, &a), &g) in state.angles.iter_mut().zip(action).zip(&self.arm.gains) {
            let clipped = a.clamp(-1.0, 1.0);
            if clipped != a {
                self.clipped_actions += 1;
            }
            *q += g * clipped * scale;
        }
        self.arm.clamp(&mut state.angles);
        state.step += 1;
        let step = state.step;
        if self.task.kind.is_trajectory() {
            let (goal, obstacles) = self.place(step)?;
            let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
            state.goal = goal;
            state.obstacles = obstacles;
        }
        self.output()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reach_env(joints: usize) -> Env {
        Env::new(ArmModel::planar(joints).unwrap(), TaskSpec::reach()).unwrap()
    }

    #[test]
    fn same_seed_same_goal() {
        let mut a = reach_env(2);
        let mut b = reach_env(2);
        assert_eq!(a.reset(11).unwrap(), b.reset(11).unwrap());
        assert_ne!(a.reset(12).unwrap().goal, b.reset(11).unwrap().goal);

        let spec = TaskSpec::trajectory(TaskKind::TrajSpiral, 6);
        let mut a = Env::new(ArmModel::spatial6().unwrap(), spec.clone()).unwrap();
        let mut b = Env::new(ArmModel::spatial6().unwrap(), spec).unwrap();
        assert_eq!(a.reset(5).unwrap(), b.reset(5).unwrap());
    }

    #[test]
    fn reach_goals_stay_in_the_annulus() {
        for (arm, planar) in [(ArmModel::planar(2).unwrap(), true), (ArmModel::spatial6().unwrap(), false)] {
            let reach = arm.reach();
            let mut env = Env::new(arm, TaskSpec::reach()).unwrap();
            for seed in 0..10_000 {
                let g = env.reset(seed).unwrap().goal;
                let r = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                assert!(r >= 0.4 * reach - 1e-12 && r <= 0.9 * reach + 1e-12, "radius {r}");
                assert!(g[2] >= 0.05 * reach && g[2] <= 0.35 * reach, "height {}", g[2]);
                assert!(r <= reach - 0.1);
                if planar {
                    assert!(g[1].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_action_keeps_the_pose() {
        let mut env = reach_env(4);
        let first = env.reset(3).unwrap();
        let next = env.step(&[0.0; 4]).unwrap();
        assert_eq!(first.observation, next.observation);
        assert_eq!(first.achieved_goal, next.achieved_goal);
    }

    #[test]
    fn halved_gains_move_half_as_far() {
        let action = [0.7, -0.3, 0.2, 1.0];
        let mut moved = Vec::new();
        for scale in [1.0, 0.5] {
            let task = TaskSpec { gain_scale: scale, ..TaskSpec::reach() };
            let mut env = Env::new(ArmModel::planar(4).unwrap(), task).unwrap();
            env.reset(0).unwrap();
            env.step(&action).unwrap();
            let q = &env.state().unwrap().angles;
            moved.push(q.iter().zip(&env.arm().home).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
        for (full, half) in moved[0].iter().zip(&moved[1]) {
            assert_eq!(half * 2.0, *full);
        }
    }

    #[test]
    fn out_of_range_actions_are_clipped_and_counted() {
        let mut a = reach_env(2);
        let mut b = reach_env(2);
        a.reset(1).unwrap();
        b.reset(1).unwrap();
        assert_eq!(a.step(&[3.0, -7.0]).unwrap(), b.step(&[1.0, -1.0]).unwrap());
        assert_eq!(a.clipped_actions(), 2);
        assert!(matches!(a.step(&[f64::NAN, 0.0]), Err(EnvError::NonFiniteAction { index: 0 })));
    }

    #[test]
    fn episodes_end_after_t_steps() {
        let mut env = reach_env(2);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::NotReset)));
        env.reset(0).unwrap();
        for t in 1..=DEFAULT_EPISODE_LEN {
            let out = env.step(&[0.1, 0.1]).unwrap();
            assert_eq!(out.done, t == DEFAULT_EPISODE_LEN);
        }
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::EpisodeOver(_))));
    }

    #[test]
    fn trajectory_goals_move_only_on_the_update_period() {
        for kind in [TaskKind::TrajSinusoid, TaskKind::TrajCircle, TaskKind::TrajSpiral] {
            let mut env = Env::new(ArmModel::planar(4).unwrap(), TaskSpec::trajectory(kind, 6)).unwrap();
            let mut prev = env.reset(9).unwrap().goal;
            assert_eq!(prev.len(), 12);
            for t in 1..=DEFAULT_EPISODE_LEN {
                let goal = env.step(&[0.0; 4]).unwrap().goal;
                if t % 3 == 0 {
                    assert_ne!(goal, prev, "{kind} step {t}");
                } else {
                    assert_eq!(goal, prev, "{kind} step {t}");
                }
                prev = goal;
            }
        }
    }

    #[test]
    fn trajectory_points_are_reachable_and_obstacles_above() {
        for kind in [TaskKind::TrajSinusoid, TaskKind::TrajCircle, TaskKind::TrajSpiral] {
            for arm in [ArmModel::planar(2).unwrap(), ArmModel::planar(4).unwrap(), ArmModel::spatial6().unwrap()] {
                let reach = arm.reach();
                let mut env = Env::new(arm, TaskSpec::trajectory(kind, 6)).unwrap();
                for seed in 0..50 {
                    let mut out = env.reset(seed).unwrap();
                    loop {
                        let g = &out.goal;
                        assert!(distance(&g[..3], &[0.0; 3]) <= reach - 0.09);
                        for o in g[3..].chunks(3) {
                            assert!(o[2] > g[2]);
                        }
                        if out.done {
                            break;
                        }
                        out = env.step(&vec![0.0; env.arm().joint_count()]).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn observation_layout_round_trips() {
        let mut env = Env::new(ArmModel::spatial6().unwrap(), TaskSpec::reach()).unwrap();
        let out = env.reset(2).unwrap();
        assert_eq!(out.observation.len(), env.observation_dim());
        let obs = Observation::from_slice(6, &out.observation).unwrap();
        assert_eq!(obs.to_vec(), out.observation);
        assert_eq!(obs.end_effector.to_vec(), out.achieved_goal);
        assert_eq!(obs.goal.to_vec(), out.goal);
        assert_eq!(Observation::angles_of(6, &out.observation), env.arm().home.as_slice());
    }

    #[test]
    fn reward_codomain_is_exhaustive() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reach = TaskSpec::reach();
        let traj = TaskSpec::trajectory(TaskKind::TrajCircle, 6);
        for _ in 0..5000 {
            let mut pt = || -> Vec<f64> { (0..3).map(|_| rng.random_range(-0.2..0.2)).collect() };
            let ag = pt();
            let r = reach.reward(&pt(), &ag).unwrap();
            assert!(r == 0.0 || r == -1.0);
            let g: Vec<f64> = (0..4).flat_map(|_| pt()).collect();
            let r = traj.reward(&g, &ag).unwrap();
            assert!(r == 0.0 || r == -0.5 || r == -1.0);
        }
        assert!(reach.reward(&[0.0; 12], &[0.0; 3]).is_err());
    }
}
