use super::arm::{distance, forward_kinematics, ArmModel, Point};
use super::{EnvError, Observation, TaskSpec};

const IK_ITERS: usize = 200;
const IK_DAMPING: f64 = 0.05;
const IK_TOL: f64 = 1e-6;

/// Hand-written tracking policy: solves inverse kinematics for the current
/// goal `G+` and drives each joint toward the solution as fast as its gain
/// allows.
#[derive(Debug, Clone)]
pub struct ScriptedTracker {
    arm: ArmModel,
    step_scale: f64,
}

impl ScriptedTracker {
    pub fn new(arm: ArmModel, task: &TaskSpec) -> Self {
        let step_scale = task.gain_scale * arm.dt;
        Self { arm, step_scale }
    }

    /// Action for a flat observation and goal vector.
    pub fn act(&self, observation: &[f64], goal: &[f64]) -> Result<Vec<f64>, EnvError> {
        let j = self.arm.joint_count();
        if observation.len() != Observation::dim(j) {
            return Err(EnvError::Config(format!("observation has {} entries", observation.len())));
        }
        let q = Observation::angles_of(j, observation);
        let target = [goal[0], goal[1], goal[2]];
        let solution = self.solve(q, target)?;
        Ok(solution
            .iter()
            .zip(q)
            .zip(&self.arm.gains)
            .map(|((s, c), g)| ((s - c) / (g * self.step_scale)).clamp(-1.0, 1.0))
            .collect())
    }

    /// Reachable joint configuration for `target`, preferring the one that
    /// takes the fewest steps to reach from `q`.
    pub fn solve(&self, q: &[f64], target: Point) -> Result<Vec<f64>, EnvError> {
        let mut best: Option<(bool, f64, Vec<f64>)> = None;
        let mut starts = vec![q.to_vec()];
        starts.extend(self.starts());
        for start in starts {
            let (mut sol, err) = self.dls(start, target)?;
            self.wrap_near(&mut sol, q);
            let converged = err < 1e-4;
            let cost = if converged { self.travel_steps(q, &sol) } else { err };
            let better = match &best {
                None => true,
                Some((bc, bcost, _)) => (converged && !bc) || (converged == *bc && cost < *bcost),
            };
            if better {
                best = Some((converged, cost, sol));
            }
        }
        Ok(best.map(|b| b.2).unwrap_or_else(|| q.to_vec()))
    }

    /// Fixed seeds covering both elbow branches on either side of the base.
    fn starts(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for base in [0.0, std::f64::consts::PI] {
            for bend in [0.8, -0.8] {
                let mut s = self.arm.home.clone();
                for (i, a) in s.iter_mut().enumerate().skip(1) {
                    *a += if i % 2 == 1 { bend } else { 0.0 };
                }
                s[0] += base;
                out.push(s);
            }
        }
        out
    }

    /// Shifts each angle by whole turns to land nearest `q` within limits.
    fn wrap_near(&self, sol: &mut [f64], q: &[f64]) {
        let tau = std::f64::consts::TAU;
        for i in 0..sol.len() {
            let mut a = sol[i] + ((q[i] - sol[i]) / tau).round() * tau;
            while a > self.arm.upper_limits[i] {
                a -= tau;
            }
            while a < self.arm.lower_limits[i] {
                a += tau;
            }
            if a <= self.arm.upper_limits[i] {
                sol[i] = a;
            }
        }
    }

    fn travel_steps(&self, from: &[f64], to: &[f64]) -> f64 {
        from.iter()
            .zip(to)
            .zip(&self.arm.gains)
            .map(|((a, b), g)| (a - b).abs() / (g * self.step_scale))
            .fold(0.0, f64::max)
    }

    /// Damped least squares with a finite-difference Jacobian, projected
    /// onto the joint limits every iteration.
    fn dls(&self, mut q: Vec<f64>, target: Point) -> Result<(Vec<f64>, f64), EnvError> {
        let j = q.len();
        let h = 1e-6;
        for _ in 0..IK_ITERS {
            let p = forward_kinematics(&self.arm, &q)?.end_effector;
            let e = [target[0] - p[0], target[1] - p[1], target[2] - p[2]];
            if distance(&e, &[0.0; 3]) < IK_TOL {
                break;
            }
            let mut jac = vec![[0.0; 3]; j];
            for i in 0..j {
                let mut hi = q.clone();
                let mut lo = q.clone();
                hi[i] += h;
                lo[i] -= h;
                let a = forward_kinematics(&self.arm, &hi)?.end_effector;
                let b = forward_kinematics(&self.arm, &lo)?.end_effector;
                for r in 0..3 {
                    jac[i][r] = (a[r] - b[r]) / (2.0 * h);
                }
            }
            // Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e
            let mut m = [[0.0; 3]; 3];
            for col in &jac {
                for r in 0..3 {
                    for c in 0..3 {
                        m[r][c] += col[r] * col[c];
                    }
                }
            }
            for (r, row) in m.iter_mut().enumerate() {
                row[r] += IK_DAMPING * IK_DAMPING;
            }
            let y = solve3(m, e);
            for (qi, col) in q.iter_mut().zip(&jac) {
                *qi += col[0] * y[0] + col[1] * y[1] + col[2] * y[2];
            }
            self.arm.clamp(&mut q);
        }
        let p = forward_kinematics(&self.arm, &q)?.end_effector;
        Ok((q, distance(&p, &target)))
    }
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs())).unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, Environment, TaskKind};

    fn success_rate(arm: ArmModel, task: TaskSpec, episodes: u64) -> f64 {
        let tracker = ScriptedTracker::new(arm.clone(), &task);
        let mut env = Env::new(arm, task.clone()).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for seed in 0..episodes {
            let mut out = env.reset(1000 + seed).unwrap();
            while !out.done {
                let goal = out.goal.clone();
                let a = tracker.act(&out.observation, &goal).unwrap();
                out = env.step(&a).unwrap();
                hits += (task.reward(&out.goal, &out.achieved_goal).unwrap() == 0.0) as usize;
                total += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn solves_a_reachable_point() {
        let arm = ArmModel::planar(2).unwrap();
        let t = ScriptedTracker::new(arm.clone(), &TaskSpec::reach());
        let q = t.solve(&arm.home, [1.2, 0.0, 0.5]).unwrap();
        let p = forward_kinematics(&arm, &q).unwrap().end_effector;
        assert!(distance(&p, &[1.2, 0.0, 0.5]) < 1e-4);
    }

    #[test]
    fn reaches_most_goals() {
        for arm in [ArmModel::planar(2).unwrap(), ArmModel::planar(4).unwrap()] {
            let rate = success_rate(arm, TaskSpec::reach(), 20);
            assert!(rate >= 0.9, "reach success {rate}");
        }
        // the spatial arm first has to yaw toward goals anywhere around it
        let rate = success_rate(ArmModel::spatial6().unwrap(), TaskSpec::reach(), 20);
        assert!(rate >= 0.85, "spatial reach success {rate}");
    }

    #[test]
    fn tracks_moving_goals() {
        for kind in [TaskKind::TrajSinusoid, TaskKind::TrajCircle, TaskKind::TrajSpiral] {
            let rate = success_rate(ArmModel::planar(2).unwrap(), TaskSpec::trajectory(kind, 6), 20);
            assert!(rate >= 0.7, "{kind} success {rate}");
        }
    }
}
