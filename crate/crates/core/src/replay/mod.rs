//! Episodic replay buffer with context-window sampling and hindsight relabeling.

mod dump;

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::env::{EnvError, ObstaclePlacement, TaskSpec};

pub use dump::{dump_buffer, restore_buffer, BUFFER_MAGIC, BUFFER_VERSION};

pub const DEFAULT_CAPACITY: usize = 1000;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay buffer holds no transitions yet")]
    NotReady,
    #[error("episode is empty")]
    EmptyEpisode,
    #[error("{what} has {got} entries, buffer stores {expected}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("step {step}: {what} contains a non-finite value")]
    NonFinite { step: usize, what: &'static str },
    #[error("her fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("anchor {anchor} is not a valid transition of episode {episode}")]
    InvalidAnchor { episode: usize, anchor: usize },
    #[error("buffer file: {0}")]
    Format(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One stored time step `(s_t, g_t, ag_t, a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub goal: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub obs: usize,
    pub goal: usize,
    pub achieved_goal: usize,
    pub action: usize,
}

impl Dims {
    fn of(step: &StepRecord) -> Self {
        Self {
            obs: step.obs.len(),
            goal: step.goal.len(),
            achieved_goal: step.achieved_goal.len(),
            action: step.action.len(),
        }
    }

    fn check(&self, step: &StepRecord) -> Result<(), ReplayError> {
        for (what, expected, got) in [
            ("observation", self.obs, step.obs.len()),
            ("goal", self.goal, step.goal.len()),
            ("achieved goal", self.achieved_goal, step.achieved_goal.len()),
            ("action", self.action, step.action.len()),
        ] {
            if expected != got {
                return Err(ReplayError::Dim { what, expected, got });
            }
        }
        Ok(())
    }
}

/// `K+1` consecutive steps of one episode ending at the anchor, plus the
/// step that follows the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    /// Buffer position of the source episode at sampling time.
    pub episode: usize,
    pub anchor: usize,
    /// Episode step index of every window row; padding repeats step 0.
    pub indices: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub next_obs: Vec<f64>,
    pub next_goal: Vec<f64>,
    pub next_achieved_goal: Vec<f64>,
    pub relabeled: bool,
    pub reward: Option<f64>,
}

impl ContextWindow {
    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("windows hold at least one step")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub windows: Vec<ContextWindow>,
    pub her_count: usize,
}

/// Ring of whole episodes; the oldest episode is evicted first.
#[derive(Debug, Clone)]
pub struct MainBuffer {
    episodes: VecDeque<Vec<StepRecord>>,
    capacity: usize,
    dims: Option<Dims>,
    /// `anchor_ends[i]` = anchors in episodes `0..=i`.
    anchor_ends: Vec<usize>,
}

impl Default for MainBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl MainBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity: capacity.max(1),
            dims: None,
            anchor_ends: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn dims(&self) -> Option<Dims> {
        self.dims
    }

    pub fn episode(&self, i: usize) -> Option<&[StepRecord]> {
        self.episodes.get(i).map(|e| e.as_slice())
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[StepRecord]> {
        self.episodes.iter().map(|e| e.as_slice())
    }

    /// Number of `(episode, t)` pairs that can anchor a window.
    pub fn anchor_count(&self) -> usize {
        self.anchor_ends.last().copied().unwrap_or(0)
    }

    pub fn store_episode(&mut self, episode: Vec<StepRecord>) -> Result<(), ReplayError> {
        let first = episode.first().ok_or(ReplayError::EmptyEpisode)?;
        let dims = self.dims.unwrap_or_else(|| Dims::of(first));
        for (t, step) in episode.iter().enumerate() {
            dims.check(step)?;
            for (what, v) in [
                ("observation", &step.obs),
                ("goal", &step.goal),
                ("achieved goal", &step.achieved_goal),
                ("action", &step.action),
            ] {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(ReplayError::NonFinite { step: t, what });
                }
            }
        }
        self.dims = Some(dims);
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        let mut total = 0;
        self.anchor_ends = self
            .episodes
            .iter()
            .map(|e| {
                total += e.len().saturating_sub(1);
                total
            })
            .collect();
    }

    /// Maps a flat anchor number to `(episode, t)`.
    fn locate(&self, flat: usize) -> (usize, usize) {
        let episode = self.anchor_ends.partition_point(|&end| end <= flat);
        let start = if episode == 0 { 0 } else { self.anchor_ends[episode - 1] };
        (episode, flat - start)
    }

    /// Window ending at step `anchor` of episode `episode`, front-padded
    /// with step 0 when fewer than `k` steps precede it.
    pub fn window_at(&self, episode: usize, anchor: usize, k: usize) -> Result<ContextWindow, ReplayError> {
        let steps = self.episodes.get(episode).ok_or(ReplayError::InvalidAnchor { episode, anchor })?;
        if anchor + 1 >= steps.len() {
            return Err(ReplayError::InvalidAnchor { episode, anchor });
        }
        let indices: Vec<usize> = (0..=k).map(|i| (anchor + i).saturating_sub(k)).collect();
        let next = &steps[anchor + 1];
        Ok(ContextWindow {
            episode,
            anchor,
            steps: indices.iter().map(|&i| steps[i].clone()).collect(),
            indices,
            next_obs: next.obs.clone(),
            next_goal: next.goal.clone(),
            next_achieved_goal: next.achieved_goal.clone(),
            relabeled: false,
            reward: None,
        })
    }

    /// `n` windows with anchors drawn uniformly over all transitions, of
    /// which `⌊her_fraction·n⌋`, chosen uniformly, are marked for relabeling.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, k: usize, her_fraction: f64, rng: &mut R) -> Result<SampledBatch, ReplayError> {
        if !(0.0..=1.0).contains(&her_fraction) {
            return Err(ReplayError::InvalidFraction(her_fraction));
        }
        let total = self.anchor_count();
        if total == 0 {
            return Err(ReplayError::NotReady);
        }
        let mut windows = (0..n)
            .map(|_| {
                let (e, t) = self.locate(rng.random_range(0..total));
                self.window_at(e, t, k)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let her_count = (her_fraction * n as f64).floor() as usize;
        for i in index::sample(rng, n, her_count) {
            windows[i].relabeled = true;
        }
        Ok(SampledBatch { windows, her_count })
    }
}

/// Replaces the `G+` part of every goal in the window, including the next
/// step's, with the achieved goal that follows the window.
pub fn her_relabel(window: &mut ContextWindow) {
    let ag = window.next_achieved_goal.clone();
    let n = ag.len();
    for step in &mut window.steps {
        step.goal[..n].copy_from_slice(&ag);
    }
    window.next_goal[..n].copy_from_slice(&ag);
}

/// Redraws the `G−` points around the relabeled `G+` using the
/// environment's obstacle offset distribution. One draw is shared by every
/// row so obstacles stay consistent along the window.
pub fn relabel_obstacles<R: Rng + ?Sized>(window: &mut ContextWindow, placement: &ObstaclePlacement, rng: &mut R) {
    let count = window.next_goal.len() / 3 - 1;
    if count == 0 {
        return;
    }
    let anchor: [f64; 3] = [window.next_goal[0], window.next_goal[1], window.next_goal[2]];
    let mut obstacles = Vec::with_capacity(3 * count);
    for o in placement.sample_offsets(count, rng) {
        obstacles.extend([anchor[0] + o[0], anchor[1] + o[1], anchor[2] + o[2]]);
    }
    for step in &mut window.steps {
        step.goal[3..].copy_from_slice(&obstacles);
    }
    window.next_goal[3..].copy_from_slice(&obstacles);
}

/// Rewards of the windows' final transitions, computed against the
/// (possibly relabeled) next goal.
pub fn compute_rewards(batch: &mut SampledBatch, task: &TaskSpec) -> Result<(), ReplayError> {
    for w in &mut batch.windows {
        w.reward = Some(task.reward(&w.next_goal, &w.next_achieved_goal)?);
    }
    Ok(())
}

/// Copies the relabeled `G+` into the observations that carry the goal at
/// `offset`, so relabeled rows stay self-consistent.
pub fn relabel_observation_goal(window: &mut ContextWindow, offset: usize) {
    let g = window.next_goal[..3].to_vec();
    for step in &mut window.steps {
        step.obs[offset..offset + 3].copy_from_slice(&g);
    }
    window.next_obs[offset..offset + 3].copy_from_slice(&g);
}

/// How marked windows are rewritten.
#[derive(Debug, Clone, Default)]
pub struct Relabel {
    pub placement: ObstaclePlacement,
    /// Position of the `G+` copy inside observations, if any.
    pub obs_goal_offset: Option<usize>,
}

/// Samples, relabels the marked windows and fills in rewards.
pub fn sample_training_batch<R: Rng + ?Sized>(
    buffer: &MainBuffer,
    n: usize,
    k: usize,
    her_fraction: f64,
    task: &TaskSpec,
    relabel: &Relabel,
    rng: &mut R,
) -> Result<SampledBatch, ReplayError> {
    let mut batch = buffer.sample_batch(n, k, her_fraction, rng)?;
    for w in batch.windows.iter_mut().filter(|w| w.relabeled) {
        her_relabel(w);
        if task.has_obstacles() {
            relabel_obstacles(w, &relabel.placement, rng);
        }
        if let Some(offset) = relabel.obs_goal_offset {
            relabel_observation_goal(w, offset);
        }
    }
    compute_rewards(&mut batch, task)?;
    Ok(batch)
}
