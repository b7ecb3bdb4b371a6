/// Sparse reaching reward: `0` within `threshold` (inclusive), else `−1`.
pub fn reward_reach(d_goal: f64, threshold: f64) -> f64 {
    if d_goal <= threshold {
        0.0
    } else {
        -1.0
    }
}

/// `0.5·(r_goal + r_obst)` where `r_goal` is the reaching term at `d_g` and
/// `r_obst` is `0` only when every obstacle is at least `d_o` away.
pub fn reward_obstacle_task(d_goal: f64, obstacle_distances: &[f64], d_g: f64, d_o: f64) -> f64 {
    let r_goal = reward_reach(d_goal, d_g);
    let r_obst = if obstacle_distances.iter().all(|&d| d >= d_o) { 0.0 } else { -1.0 };
    0.5 * (r_goal + r_obst)
}
