use serde::{Deserialize, Serialize};

use super::EnvError;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmKind {
    /// Every joint pitches about the base `y` axis; the chain lives in the
    /// vertical `x–z` plane.
    Planar,
    /// Joint axes alternate yaw (`z`) and pitch, starting with yaw.
    Spatial,
}

/// Velocity-controlled serial chain. Each link extends along the local `x`
/// axis of its joint frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub kind: ArmKind,
    pub link_lengths: Vec<f64>,
    /// Joint speed in rad/s at full action.
    pub gains: Vec<f64>,
    pub lower_limits: Vec<f64>,
    pub upper_limits: Vec<f64>,
    /// Seconds per control step.
    pub dt: f64,
    pub home: Vec<f64>,
}

/// Full-action joint speeds, base to wrist.
pub const DEFAULT_GAINS: [f64; 6] = [5.0, 4.0, 3.0, 2.0, 1.5, 1.0];
pub const DEFAULT_DT: f64 = 0.1;

impl ArmModel {
    /// Planar chain of `joints` unit links, pointing straight up at home.
    pub fn planar(joints: usize) -> Result<Self, EnvError> {
        let mut home = vec![0.0; joints];
        if let Some(h) = home.first_mut() {
            *h = std::f64::consts::FRAC_PI_2;
        }
        Self::build(ArmKind::Planar, vec![1.0; joints], home)
    }

    /// Six-joint yaw/pitch chain with 0.4 m links; the first pitch joint
    /// lifts the rest of the arm vertically at home.
    pub fn spatial6() -> Result<Self, EnvError> {
        let mut home = vec![0.0; 6];
        home[1] = std::f64::consts::FRAC_PI_2;
        Self::build(ArmKind::Spatial, vec![0.4; 6], home)
    }

    pub fn from_kind(kind: ArmKind, joints: usize) -> Result<Self, EnvError> {
        match kind {
            ArmKind::Planar => Self::planar(joints),
            ArmKind::Spatial if joints == 6 => Self::spatial6(),
            ArmKind::Spatial => Err(EnvError::Config(format!("spatial arm has 6 joints, not {joints}"))),
        }
    }

    fn build(kind: ArmKind, link_lengths: Vec<f64>, home: Vec<f64>) -> Result<Self, EnvError> {
        let j = link_lengths.len();
        if !(2..=DEFAULT_GAINS.len()).contains(&j) {
            return Err(EnvError::Config(format!("joint count must be in 2..=6, got {j}")));
        }
        let limit = 2.0 * std::f64::consts::PI;
        let model = Self {
            kind,
            link_lengths,
            gains: DEFAULT_GAINS[..j].to_vec(),
            lower_limits: vec![-limit; j],
            upper_limits: vec![limit; j],
            dt: DEFAULT_DT,
            home,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let j = self.joint_count();
        if j < 2 {
            return Err(EnvError::Config("an arm needs at least 2 joints".into()));
        }
        for (name, v) in [
            ("gains", &self.gains),
            ("lower_limits", &self.lower_limits),
            ("upper_limits", &self.upper_limits),
            ("home", &self.home),
        ] {
            if v.len() != j {
                return Err(EnvError::Config(format!("{name} has {} entries for {j} joints", v.len())));
            }
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(EnvError::Config("link lengths must be positive".into()));
        }
        if self.gains.iter().any(|&g| !(g > 0.0)) {
            return Err(EnvError::Config("joint gains must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(EnvError::Config("dt must be positive".into()));
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.link_lengths.len()
    }

    /// Distance from the base to a fully stretched end effector.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn clamp(&self, angles: &mut [f64]) {
        for ((a, lo), hi) in angles.iter_mut().zip(&self.lower_limits).zip(&self.upper_limits) {
            *a = a.clamp(*lo, *hi);
        }
    }
}

/// Joint origins, link directions and the end-effector point of a pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub joint_positions: Vec<Point>,
    pub link_directions: Vec<Point>,
    pub end_effector: Point,
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn yaw(q: f64) -> Mat3 {
    let (s, c) = q.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Positive angles lift the local `x` axis toward `z`.
fn pitch(q: f64) -> Mat3 {
    let (s, c) = q.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

pub fn forward_kinematics(model: &ArmModel, angles: &[f64]) -> Result<Kinematics, EnvError> {
    let j = model.joint_count();
    if angles.len() != j {
        return Err(EnvError::ActionDim { expected: j, got: angles.len() });
    }
    let mut rot: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut p = [0.0; 3];
    let mut joint_positions = Vec::with_capacity(j);
    let mut link_directions = Vec::with_capacity(j);
    for (i, (&q, &len)) in angles.iter().zip(&model.link_lengths).enumerate() {
        let r = match (model.kind, i % 2) {
            (ArmKind::Planar, _) | (ArmKind::Spatial, 1) => pitch(q),
            (ArmKind::Spatial, _) => yaw(q),
        };
        rot = matmul3(&rot, &r);
        joint_positions.push(p);
        let dir = [rot[0][0], rot[1][0], rot[2][0]];
        link_directions.push(dir);
        for k in 0..3 {
            p[k] += len * dir[k];
        }
    }
    Ok(Kinematics {
        joint_positions,
        link_directions,
        end_effector: p,
    })
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
