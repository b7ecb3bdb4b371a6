//! Training loop for the five learners: episode collection, twin-critic
//! updates with delayed actor steps, soft target updates and validation.

mod config;

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

pub use config::{
    build_variant, parse_override, parse_pairs, resolve_key, ArmConfig, TargetCadence, TrainConfig, Variant, VariantSpec, CONTEXT_LEN,
    DEFAULT_HER_FRACTION, KEYS,
};

use crate::env::{effective_placement, Env, EnvError, Environment, TaskSpec};
use crate::ndnum::{no_grad, Adam, NdError, Tensor};
use crate::nets::{soft_update, write_checkpoint, ActorNet, CriticNet, NetError};
use crate::replay::{sample_training_batch, Relabel, MainBuffer, ReplayError, SampledBatch, StepRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: u64 },
    #[error("update {update} failed ({source}); batch written to {}", path.display())]
    Aborted {
        update: u64,
        path: PathBuf,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One collected episode: `T+1` records (the last has a zero action) and
/// the `T` rewards received.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub records: Vec<StepRecord>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    pub fn successes(&self) -> usize {
        self.rewards.iter().filter(|r| **r == 0.0).count()
    }
}

fn row(obs: &[f64], goal: &[f64]) -> Vec<f64> {
    let mut r = Vec::with_capacity(obs.len() + goal.len());
    r.extend_from_slice(obs);
    r.extend_from_slice(goal);
    r
}

/// Deterministic action of `actor` for one context window.
pub fn act(actor: &ActorNet, context: &VecDeque<Vec<f64>>) -> Result<Vec<f64>, TrainError> {
    let rows: Vec<Vec<f64>> = context.iter().cloned().collect();
    let out = no_grad(|| actor.forward(&Tensor::from_rows(&rows)?).map_err(TrainError::from))?;
    Ok(out.to_vec())
}

/// Runs one episode from `seed`, acting on the sliding context window with
/// Gaussian exploration noise of scale `sigma`.
pub fn run_episode<E, R>(actor: &ActorNet, env: &mut E, task: &TaskSpec, sigma: f64, seed: u64, rng: &mut R) -> Result<Episode, TrainError>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut out = env.reset(seed)?;
    let mut context: VecDeque<Vec<f64>> = std::iter::repeat_n(row(&out.observation, &out.goal), actor.window_len()).collect();
    let mut records = Vec::with_capacity(task.episode_len + 1);
    let mut rewards = Vec::with_capacity(task.episode_len);
    while !out.done {
        let mut action = act(actor, &context)?;
        if sigma > 0.0 {
            for a in &mut action {
                *a = (*a + noise.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        let next = env.step(&action)?;
        rewards.push(task.reward(&next.goal, &next.achieved_goal)?);
        records.push(StepRecord {
            obs: out.observation,
            goal: out.goal,
            achieved_goal: out.achieved_goal,
            action,
        });
        context.pop_front();
        context.push_back(row(&next.observation, &next.goal));
        out = next;
    }
    let zero = vec![0.0; actor.action_dim()];
    records.push(StepRecord {
        obs: out.observation,
        goal: out.goal,
        achieved_goal: out.achieved_goal,
        action: zero,
    });
    Ok(Episode { records, rewards })
}

/// Noise-free rollouts from `seeds`: mean reward per transition and the
/// fraction of transitions with success-level reward.
pub fn validate<E: Environment + ?Sized>(actor: &ActorNet, env: &mut E, task: &TaskSpec, seeds: &[u64]) -> Result<(f64, f64), TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("validation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut successes, mut count) = (0.0, 0, 0);
    for &seed in seeds {
        let ep = run_episode(actor, env, task, 0.0, seed, &mut rng)?;
        total += ep.rewards.iter().sum::<f64>();
        successes += ep.successes();
        count += ep.rewards.len();
    }
    let n = count.max(1) as f64;
    Ok((total / n, successes as f64 / n))
}

/// Online and target networks with their optimizers.
pub struct Learner {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub target_actor: ActorNet,
    pub target_critic: CriticNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, input_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self, TrainError> {
        let len = cfg.window_len();
        let actor = ActorNet::new(input_dim, len, action_dim, cfg.net_variant, &cfg.net, rng)?;
        let critic = CriticNet::new(input_dim, len, action_dim, cfg.net_variant, &cfg.net, rng)?;
        Ok(Self {
            target_actor: actor.deep_copy(),
            target_critic: critic.deep_copy(),
            actor_opt: Adam::new(cfg.actor_lr, &actor.params())?,
            critic_opt: Adam::new(cfg.critic_lr, &critic.params())?,
            actor,
            critic,
        })
    }

    pub fn soft_update(&self, tau: f64) -> Result<(), TrainError> {
        soft_update(&self.target_actor.params(), &self.actor.params(), tau)?;
        soft_update(&self.target_critic.params(), &self.critic.params(), tau)?;
        Ok(())
    }
}

/// Batch tensors: current windows, next windows, actions and rewards.
pub struct BatchTensors {
    pub windows: Tensor,
    pub next_windows: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
}

impl BatchTensors {
    pub fn from_batch(batch: &SampledBatch) -> Result<Self, TrainError> {
        let mut cur = Vec::new();
        let mut next = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::with_capacity(batch.windows.len());
        for w in &batch.windows {
            for s in &w.steps {
                cur.push(row(&s.obs, &s.goal));
            }
            for s in &w.steps[1..] {
                next.push(row(&s.obs, &s.goal));
            }
            next.push(row(&w.next_obs, &w.next_goal));
            actions.push(w.last().action.clone());
            rewards.push(w.reward.ok_or_else(|| TrainError::Config("batch rewards not computed".into()))?);
        }
        Ok(Self {
            windows: Tensor::from_rows(&cur)?,
            next_windows: Tensor::from_rows(&next)?,
            actions: Tensor::from_rows(&actions)?,
            rewards,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLosses {
    pub critic: [f64; 2],
    pub actor: Option<f64>,
}

fn finite(what: &'static str, v: f64, update: u64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { what, update })
    }
}

/// `y = r + γ·min(Q₁′, Q₂′)` at the next windows and the target actor's actions.
pub fn critic_targets<R: Rng + ?Sized>(learner: &Learner, b: &BatchTensors, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<f64>, TrainError> {
    no_grad(|| {
        let mut next_a = learner.target_actor.forward(&b.next_windows)?;
        if cfg.target_smoothing {
            let noise = Normal::new(0.0, cfg.smoothing_sigma).map_err(|e| TrainError::Config(e.to_string()))?;
            let c = cfg.smoothing_clip;
            let data = next_a.to_vec().into_iter().map(|a| (a + noise.sample(rng).clamp(-c, c)).clamp(-1.0, 1.0)).collect();
            next_a = Tensor::new(&next_a.shape(), data)?;
        }
        let (q1, q2) = learner.target_critic.forward(&b.next_windows, &next_a)?;
        let q = q1.minimum(&q2)?.to_vec();
        let floor = -1.0 / (1.0 - cfg.gamma);
        Ok(b.rewards
            .iter()
            .zip(q)
            .map(|(r, q)| {
                let y = r + cfg.gamma * q;
                if cfg.clip_target {
                    y.clamp(floor, 0.0)
                } else {
                    y
                }
            })
            .collect())
    })
}

/// Regresses both critic heads onto `y`; returns the two mean squared errors.
pub fn critic_step(learner: &mut Learner, b: &BatchTensors, y: &[f64], t: u64) -> Result<[f64; 2], TrainError> {
    let y = Tensor::new(&[y.len(), 1], y.to_vec())?;
    let (q1, q2) = learner.critic.forward(&b.windows, &b.actions)?;
    let l1 = y.sub(&q1)?.square().mean();
    let l2 = y.sub(&q2)?.square().mean();
    let losses = [finite("critic loss", l1.item(), t)?, finite("critic loss", l2.item(), t)?];
    l1.add(&l2)?.backward()?;
    learner.critic_opt.step(&learner.critic.params())?;
    Ok(losses)
}

/// Minimizes `(1/N)·Σ[α‖μ‖² − min(Q₁, Q₂)]` through a frozen copy of the critic.
pub fn actor_step(learner: &mut Learner, b: &BatchTensors, alpha: f64, t: u64) -> Result<f64, TrainError> {
    let n = b.rewards.len();
    let frozen = learner.critic.frozen();
    let mu = learner.actor.forward(&b.windows)?;
    let (q1, q2) = frozen.forward(&b.windows, &mu)?;
    let loss = mu.square().sum().scale(alpha / n as f64).sub(&q1.minimum(&q2)?.mean())?;
    let value = finite("actor loss", loss.item(), t)?;
    loss.backward()?;
    learner.actor_opt.step(&learner.actor.params())?;
    Ok(value)
}

/// One critic step and, when `t` is a multiple of `w`, one actor step.
pub fn update_step<R: Rng + ?Sized>(learner: &mut Learner, batch: &SampledBatch, cfg: &TrainConfig, t: u64, rng: &mut R) -> Result<UpdateLosses, TrainError> {
    let b = BatchTensors::from_batch(batch)?;
    let y = critic_targets(learner, &b, cfg, rng)?;
    let critic = critic_step(learner, &b, &y, t)?;
    let actor = if t % cfg.actor_delay as u64 == 0 { Some(actor_step(learner, &b, cfg.alpha, t)?) } else { None };
    if cfg.target_update == TargetCadence::Update {
        learner.soft_update(cfg.tau)?;
    }
    Ok(UpdateLosses { critic, actor })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub update_idx: u64,
    pub actor_loss: Option<f64>,
    pub critic_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub update_idx: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub validation_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub updates: Vec<UpdateRecord>,
    pub epochs: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl RunMetrics {
    /// Mean validation success rate over the last `n` epochs.
    pub fn final_success(&self, n: usize) -> f64 {
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        tail.iter().map(|e| e.success_rate).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Best validation success rate reached.
    pub fn best_success(&self) -> f64 {
        self.epochs.iter().map(|e| e.success_rate).fold(0.0, f64::max)
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FAILED_BATCH_FILE: &str = "failed_batch.json";

/// Files written under a run directory.
struct Sink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Sink {
    fn open(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
            timing: BufWriter::new(File::create(dir.join(TIMING_FILE))?),
        })
    }

    fn line<T: Serialize>(&mut self, record: &T) -> Result<(), TrainError> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }

    fn checkpoint(&self, learner: &Learner, tag: &str) -> Result<(), TrainError> {
        let dir = self.dir.join(CHECKPOINT_DIR);
        for (name, params) in [
            ("actor", learner.actor.params()),
            ("critic", learner.critic.params()),
            ("target_actor", learner.target_actor.params()),
            ("target_critic", learner.target_critic.params()),
        ] {
            let mut w = BufWriter::new(File::create(dir.join(format!("{tag}{name}.ckpt")))?);
            write_checkpoint(&mut w, &params)?;
            w.flush()?;
        }
        Ok(())
    }

    fn dump_batch(&self, batch: &SampledBatch) -> Result<PathBuf, TrainError> {
        let windows: Vec<_> = batch
            .windows
            .iter()
            .map(|w| {
                serde_json::json!({
                    "episode": w.episode,
                    "anchor": w.anchor,
                    "indices": w.indices,
                    "steps": w.steps.iter().map(|s| serde_json::json!({
                        "obs": s.obs, "goal": s.goal, "achieved_goal": s.achieved_goal, "action": s.action,
                    })).collect::<Vec<_>>(),
                    "next_obs": w.next_obs,
                    "next_goal": w.next_goal,
                    "next_achieved_goal": w.next_achieved_goal,
                    "relabeled": w.relabeled,
                    "reward": w.reward,
                })
            })
            .collect();
        let path = self.dir.join(FAILED_BATCH_FILE);
        let doc = serde_json::json!({ "her_count": batch.her_count, "windows": windows });
        fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(path)
    }
}

/// Trains on an in-process environment built from the config.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunMetrics, TrainError> {
    cfg.validate()?;
    let mut env = Env::new(cfg.arm.build()?, cfg.task.clone())?;
    train_with_env(cfg, &mut env, out_dir)
}

/// Trains against any environment matching the config's arm and task.
pub fn train_with_env<E: Environment + ?Sized>(cfg: &TrainConfig, env: &mut E, out_dir: Option<&Path>) -> Result<RunMetrics, TrainError> {
    cfg.validate()?;
    let mut sink = out_dir.map(Sink::open).transpose()?;
    let result = run(cfg, env, sink.as_mut());
    if let Some(s) = sink.as_mut() {
        s.flush()?;
    }
    result
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn run<E: Environment + ?Sized>(cfg: &TrainConfig, env: &mut E, mut sink: Option<&mut Sink>) -> Result<RunMetrics, TrainError> {
    let arm = cfg.arm.build()?;
    let joints = arm.joint_count();
    let relabel = Relabel {
        placement: effective_placement(&arm, &cfg.task),
        obs_goal_offset: Some(crate::env::Observation::goal_offset(joints)),
    };
    let input_dim = crate::env::Observation::dim(joints) + cfg.task.goal_dim();

    let mut init_rng = stream(cfg.seed, 0);
    let mut noise_rng = stream(cfg.seed, 1);
    let mut sample_rng = stream(cfg.seed, 2);
    let mut seed_rng = stream(cfg.seed, 3);
    let mut validation_rng = stream(cfg.seed, 4);
    let validation_seeds: Vec<u64> = (0..cfg.validation_episodes).map(|_| validation_rng.next_u64()).collect();

    let mut learner = Learner::new(cfg, input_dim, joints, &mut init_rng)?;
    let mut buffer = MainBuffer::new(cfg.buffer_capacity);
    let mut metrics = RunMetrics::default();
    let mut t: u64 = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut reward_sum, mut reward_count) = (0.0, 0usize);
        for _ in 0..cfg.cycles {
            for _ in 0..cfg.episodes {
                let seed = seed_rng.next_u64();
                let ep = match run_episode(&learner.actor, env, &cfg.task, cfg.noise_sigma, seed, &mut noise_rng) {
                    Ok(ep) => ep,
                    Err(e) => {
                        log::error!("episode with seed {seed} aborted: {e}");
                        return Err(e);
                    }
                };
                reward_sum += ep.rewards.iter().sum::<f64>();
                reward_count += ep.rewards.len();
                buffer.store_episode(ep.records)?;
            }
            for _ in 0..cfg.updates {
                t += 1;
                let batch = sample_training_batch(&buffer, cfg.batch_size, cfg.k, cfg.her_fraction, &cfg.task, &relabel, &mut sample_rng)?;
                let losses = match update_step(&mut learner, &batch, cfg, t, &mut sample_rng) {
                    Ok(l) => l,
                    Err(e) => {
                        return Err(match sink.as_deref() {
                            Some(s) => TrainError::Aborted {
                                update: t,
                                path: s.dump_batch(&batch)?,
                                source: Box::new(e),
                            },
                            None => e,
                        })
                    }
                };
                let record = UpdateRecord {
                    epoch,
                    update_idx: t,
                    actor_loss: losses.actor,
                    critic_loss: 0.5 * (losses.critic[0] + losses.critic[1]),
                };
                if let Some(s) = sink.as_deref_mut() {
                    s.line(&record)?;
                }
                metrics.updates.push(record);
            }
            if cfg.target_update == TargetCadence::Cycle {
                learner.soft_update(cfg.tau)?;
            }
        }
        if cfg.target_update == TargetCadence::Epoch {
            learner.soft_update(cfg.tau)?;
        }
        let (validation_reward, success_rate) = validate(&learner.actor, env, &cfg.task, &validation_seeds)?;
        let record = EpochRecord {
            epoch,
            update_idx: t,
            mean_reward: reward_sum / reward_count.max(1) as f64,
            success_rate,
            validation_reward,
        };
        let seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: mean reward {:.3}, success rate {:.3}, {seconds:.1}s",
            record.mean_reward,
            record.success_rate
        );
        if let Some(s) = sink.as_deref_mut() {
            s.line(&record)?;
            writeln!(s.timing, "{}", serde_json::json!({ "epoch": epoch, "seconds": seconds }))?;
            s.flush()?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                s.checkpoint(&learner, &format!("epoch-{epoch:04}-"))?;
            }
        }
        metrics.epochs.push(record);
        metrics.epoch_seconds.push(seconds);
    }
    if let Some(s) = sink.as_deref() {
        s.checkpoint(&learner, "")?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests;
