//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comment
//! [run]
//! variant = conther_v1
//! seed = 7
//! [algo]
//! gamma = 0.98
//! ```
//!
//! A key inside `[section]` is addressed as `section.key`, which is also the
//! form accepted by overrides. `run.variant` and `task.kind` are applied
//! first because they reset the defaults of the keys that depend on them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::env::{ArmKind, ArmModel, TaskKind, TaskSpec};
use crate::nets::{NetConfig, NetVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Td3,
    Td3Her,
    Td3Context,
    ContherV0,
    ContherV1,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Td3, Variant::Td3Her, Variant::Td3Context, Variant::ContherV0, Variant::ContherV1];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Td3 => "td3",
            Variant::Td3Her => "td3_her",
            Variant::Td3Context => "td3_context",
            Variant::ContherV0 => "conther_v0",
            Variant::ContherV1 => "conther_v1",
        }
    }

    pub fn uses_context(self) -> bool {
        matches!(self, Variant::Td3Context | Variant::ContherV0 | Variant::ContherV1)
    }

    pub fn uses_her(self) -> bool {
        matches!(self, Variant::Td3Her | Variant::ContherV0 | Variant::ContherV1)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            TrainError::Config(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
        })
    }
}

pub const CONTEXT_LEN: usize = 6;
pub const DEFAULT_HER_FRACTION: f64 = 0.8;

/// What distinguishes the five learners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub k: usize,
    pub her_fraction: f64,
    pub net: NetVariant,
}

pub fn build_variant(name: &str) -> Result<VariantSpec, TrainError> {
    let variant: Variant = name.parse()?;
    Ok(VariantSpec {
        variant,
        k: if variant.uses_context() { CONTEXT_LEN } else { 0 },
        her_fraction: if variant.uses_her() { DEFAULT_HER_FRACTION } else { 0.0 },
        net: if variant == Variant::ContherV0 { NetVariant::V0 } else { NetVariant::V1 },
    })
}

/// When target networks move toward the online networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetCadence {
    /// Once at the end of every epoch.
    Epoch,
    /// After the `S` updates of every collection cycle.
    Cycle,
    /// After every critic update.
    Update,
}

impl TargetCadence {
    fn name(self) -> &'static str {
        match self {
            TargetCadence::Epoch => "epoch",
            TargetCadence::Cycle => "cycle",
            TargetCadence::Update => "update",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub kind: ArmKind,
    pub joints: usize,
}

impl ArmConfig {
    pub fn build(&self) -> Result<ArmModel, TrainError> {
        Ok(ArmModel::from_kind(self.kind, self.joints)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    /// `M`.
    pub epochs: usize,
    /// Collection/update rounds per epoch.
    pub cycles: usize,
    /// Episodes collected per cycle.
    pub episodes: usize,
    /// `S`: critic updates per cycle.
    pub updates: usize,
    /// `N`.
    pub batch_size: usize,
    /// `K`: steps of context before the current one.
    pub k: usize,
    pub gamma: f64,
    pub tau: f64,
    /// `w`: the actor updates when the global update index is a multiple of this.
    pub actor_delay: usize,
    /// `α`: weight of the squared-action penalty in the actor loss.
    pub alpha: f64,
    pub noise_sigma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub her_fraction: f64,
    pub target_update: TargetCadence,
    /// Clamps critic targets to the attainable return range `[−1/(1−γ), 0]`.
    pub clip_target: bool,
    /// Adds clipped Gaussian noise to target actions.
    pub target_smoothing: bool,
    pub smoothing_sigma: f64,
    pub smoothing_clip: f64,
    pub validation_episodes: usize,
    pub buffer_capacity: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub net: NetConfig,
    pub net_variant: NetVariant,
    pub arm: ArmConfig,
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(Variant::ContherV1)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let spec = build_variant(variant.name()).expect("known variant");
        Self {
            variant,
            seed: 0,
            epochs: 40,
            cycles: 5,
            episodes: 10,
            updates: 100,
            batch_size: 128,
            k: spec.k,
            gamma: 0.98,
            tau: 0.05,
            actor_delay: 2,
            alpha: 1.0,
            noise_sigma: 0.1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            her_fraction: spec.her_fraction,
            target_update: TargetCadence::Update,
            clip_target: true,
            target_smoothing: false,
            smoothing_sigma: 0.2,
            smoothing_clip: 0.5,
            validation_episodes: 10,
            buffer_capacity: 1000,
            checkpoint_every: 0,
            net: NetConfig {
                d_model: 32,
                heads: 2,
                ff_hidden: 64,
                fc_hidden: 64,
                output_scale: 0.01,
            },
            net_variant: spec.net,
            arm: ArmConfig {
                kind: ArmKind::Planar,
                joints: 2,
            },
            task: TaskSpec::reach(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.actor_delay == 0 {
            return bad("algo.actor_delay (w) must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("algo.gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("algo.tau must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.her_fraction) {
            return bad("algo.her_fraction must lie in [0, 1]");
        }
        if !self.variant.uses_context() && self.k != 0 {
            return bad("variants without context require algo.k = 0");
        }
        if !self.variant.uses_her() && self.her_fraction != 0.0 {
            return bad("variants without hindsight relabeling require algo.her_fraction = 0");
        }
        if self.epochs == 0 || self.cycles == 0 || self.episodes == 0 || self.batch_size == 0 {
            return bad("epochs, cycles, episodes and batch size must be positive");
        }
        if self.validation_episodes == 0 {
            return bad("run.validation_episodes must be at least 1");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.alpha >= 0.0 && self.noise_sigma >= 0.0 && self.smoothing_sigma >= 0.0 && self.smoothing_clip >= 0.0) {
            return bad("alpha and noise scales must be non-negative");
        }
        self.arm.build()?;
        self.task.validate()?;
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.k + 1
    }

    /// Parses config text on top of the defaults, then applies overrides.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self, TrainError> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, TrainError> {
        let pairs = pairs
            .iter()
            .map(|(k, v)| Ok((resolve_key(k)?, v.clone())))
            .collect::<Result<Vec<_>, TrainError>>()?;
        let last = |name: &str| pairs.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
        let mut cfg = match last("run.variant") {
            Some(v) => Self::for_variant(v.parse()?),
            None => Self::default(),
        };
        if let Some(kind) = last("task.kind") {
            let kind: TaskKind = kind.parse()?;
            cfg.task = TaskSpec::for_kind(kind);
        }
        for (key, value) in &pairs {
            if key != "run.variant" && key != "task.kind" {
                cfg.set(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        let t = &mut self.task;
        let tr = &mut t.trajectory;
        match key {
            "run.seed" => self.seed = num(key, value)?,
            "run.epochs" => self.epochs = num(key, value)?,
            "run.cycles" => self.cycles = num(key, value)?,
            "run.episodes" => self.episodes = num(key, value)?,
            "run.updates" => self.updates = num(key, value)?,
            "run.batch_size" => self.batch_size = num(key, value)?,
            "run.validation_episodes" => self.validation_episodes = num(key, value)?,
            "run.buffer_capacity" => self.buffer_capacity = num(key, value)?,
            "run.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "algo.k" => self.k = num(key, value)?,
            "algo.gamma" => self.gamma = num(key, value)?,
            "algo.tau" => self.tau = num(key, value)?,
            "algo.actor_delay" => self.actor_delay = num(key, value)?,
            "algo.alpha" => self.alpha = num(key, value)?,
            "algo.noise_sigma" => self.noise_sigma = num(key, value)?,
            "algo.actor_lr" => self.actor_lr = num(key, value)?,
            "algo.critic_lr" => self.critic_lr = num(key, value)?,
            "algo.her_fraction" => self.her_fraction = num(key, value)?,
            "algo.target_update" => {
                self.target_update = match value {
                    "epoch" => TargetCadence::Epoch,
                    "cycle" => TargetCadence::Cycle,
                    "update" => TargetCadence::Update,
                    _ => return Err(TrainError::Config(format!("`{key}` must be epoch, cycle or update"))),
                }
            }
            "algo.clip_target" => self.clip_target = num(key, value)?,
            "algo.target_smoothing" => self.target_smoothing = num(key, value)?,
            "algo.smoothing_sigma" => self.smoothing_sigma = num(key, value)?,
            "algo.smoothing_clip" => self.smoothing_clip = num(key, value)?,
            "net.variant" => {
                self.net_variant = match value {
                    "v0" => NetVariant::V0,
                    "v1" => NetVariant::V1,
                    _ => return Err(TrainError::Config(format!("`{key}` must be v0 or v1"))),
                }
            }
            "net.d_model" => self.net.d_model = num(key, value)?,
            "net.heads" => self.net.heads = num(key, value)?,
            "net.ff_hidden" => self.net.ff_hidden = num(key, value)?,
            "net.fc_hidden" => self.net.fc_hidden = num(key, value)?,
            "net.output_scale" => self.net.output_scale = num(key, value)?,
            "arm.kind" => {
                self.arm.kind = match value {
                    "planar" => ArmKind::Planar,
                    "spatial" => ArmKind::Spatial,
                    _ => return Err(TrainError::Config(format!("`{key}` must be planar or spatial"))),
                }
            }
            "arm.joints" => self.arm.joints = num(key, value)?,
            "task.goal_threshold" => t.goal_threshold = num(key, value)?,
            "task.obstacle_threshold" => t.obstacle_threshold = num(key, value)?,
            "task.update_period" => t.update_period = num(key, value)?,
            "task.episode_len" => t.episode_len = num(key, value)?,
            "task.gain_scale" => t.gain_scale = num(key, value)?,
            "task.goal_r_min" => t.goal_region.r_min = num(key, value)?,
            "task.goal_r_max" => t.goal_region.r_max = num(key, value)?,
            "task.goal_h_min" => t.goal_region.h_min = num(key, value)?,
            "task.goal_h_max" => t.goal_region.h_max = num(key, value)?,
            "task.obstacle_height_min" => t.obstacles.height_min = num(key, value)?,
            "task.obstacle_height_max" => t.obstacles.height_max = num(key, value)?,
            "task.obstacle_jitter" => t.obstacles.jitter = num(key, value)?,
            "task.sinusoid_period" => tr.sinusoid_period = num(key, value)?,
            "task.sinusoid_amp_min" => tr.sinusoid_amp_min = num(key, value)?,
            "task.sinusoid_amp_max" => tr.sinusoid_amp_max = num(key, value)?,
            "task.circle_period" => tr.circle_period = num(key, value)?,
            "task.circle_radius_min" => tr.circle_radius_min = num(key, value)?,
            "task.circle_radius_max" => tr.circle_radius_max = num(key, value)?,
            "task.circle_radius_step" => tr.circle_radius_step = num(key, value)?,
            "task.spiral_period" => tr.spiral_period = num(key, value)?,
            "task.spiral_half_height" => tr.spiral_half_height = num(key, value)?,
            "task.spiral_amp_min" => tr.spiral_amp_min = num(key, value)?,
            "task.spiral_amp_max" => tr.spiral_amp_max = num(key, value)?,
            "task.spiral_amp_step" => tr.spiral_amp_step = num(key, value)?,
            _ => {
                return Err(TrainError::UnknownKey {
                    key: key.to_string(),
                    valid: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    /// Full config in the text format; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let t = &self.task;
        let tr = &t.trajectory;
        let target = self.target_update.name();
        let net_variant = if self.net_variant == NetVariant::V0 { "v0" } else { "v1" };
        let arm_kind = if self.arm.kind == ArmKind::Planar { "planar" } else { "spatial" };
        let sections: [(&str, Vec<(&str, String)>); 5] = [
            (
                "run",
                vec![
                    ("variant", self.variant.to_string()),
                    ("seed", self.seed.to_string()),
                    ("epochs", self.epochs.to_string()),
                    ("cycles", self.cycles.to_string()),
                    ("episodes", self.episodes.to_string()),
                    ("updates", self.updates.to_string()),
                    ("batch_size", self.batch_size.to_string()),
                    ("validation_episodes", self.validation_episodes.to_string()),
                    ("buffer_capacity", self.buffer_capacity.to_string()),
                    ("checkpoint_every", self.checkpoint_every.to_string()),
                ],
            ),
            (
                "algo",
                vec![
                    ("k", self.k.to_string()),
                    ("gamma", self.gamma.to_string()),
                    ("tau", self.tau.to_string()),
                    ("actor_delay", self.actor_delay.to_string()),
                    ("alpha", self.alpha.to_string()),
                    ("noise_sigma", self.noise_sigma.to_string()),
                    ("actor_lr", self.actor_lr.to_string()),
                    ("critic_lr", self.critic_lr.to_string()),
                    ("her_fraction", self.her_fraction.to_string()),
                    ("target_update", target.to_string()),
                    ("clip_target", self.clip_target.to_string()),
                    ("target_smoothing", self.target_smoothing.to_string()),
                    ("smoothing_sigma", self.smoothing_sigma.to_string()),
                    ("smoothing_clip", self.smoothing_clip.to_string()),
                ],
            ),
            (
                "net",
                vec![
                    ("variant", net_variant.to_string()),
                    ("d_model", self.net.d_model.to_string()),
                    ("heads", self.net.heads.to_string()),
                    ("ff_hidden", self.net.ff_hidden.to_string()),
                    ("fc_hidden", self.net.fc_hidden.to_string()),
                    ("output_scale", self.net.output_scale.to_string()),
                ],
            ),
            ("arm", vec![("kind", arm_kind.to_string()), ("joints", self.arm.joints.to_string())]),
            (
                "task",
                vec![
                    ("kind", t.kind.to_string()),
                    ("goal_threshold", t.goal_threshold.to_string()),
                    ("obstacle_threshold", t.obstacle_threshold.to_string()),
                    ("update_period", t.update_period.to_string()),
                    ("episode_len", t.episode_len.to_string()),
                    ("gain_scale", t.gain_scale.to_string()),
                    ("goal_r_min", t.goal_region.r_min.to_string()),
                    ("goal_r_max", t.goal_region.r_max.to_string()),
                    ("goal_h_min", t.goal_region.h_min.to_string()),
                    ("goal_h_max", t.goal_region.h_max.to_string()),
                    ("obstacle_height_min", t.obstacles.height_min.to_string()),
                    ("obstacle_height_max", t.obstacles.height_max.to_string()),
                    ("obstacle_jitter", t.obstacles.jitter.to_string()),
                    ("sinusoid_period", tr.sinusoid_period.to_string()),
                    ("sinusoid_amp_min", tr.sinusoid_amp_min.to_string()),
                    ("sinusoid_amp_max", tr.sinusoid_amp_max.to_string()),
                    ("circle_period", tr.circle_period.to_string()),
                    ("circle_radius_min", tr.circle_radius_min.to_string()),
                    ("circle_radius_max", tr.circle_radius_max.to_string()),
                    ("circle_radius_step", tr.circle_radius_step.to_string()),
                    ("spiral_period", tr.spiral_period.to_string()),
                    ("spiral_half_height", tr.spiral_half_height.to_string()),
                    ("spiral_amp_min", tr.spiral_amp_min.to_string()),
                    ("spiral_amp_max", tr.spiral_amp_max.to_string()),
                    ("spiral_amp_step", tr.spiral_amp_step.to_string()),
                ],
            ),
        ];
        let mut out = String::new();
        for (i, (section, entries)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Every accepted `section.key`.
pub const KEYS: &[&str] = &[
    "run.variant",
    "run.seed",
    "run.epochs",
    "run.cycles",
    "run.episodes",
    "run.updates",
    "run.batch_size",
    "run.validation_episodes",
    "run.buffer_capacity",
    "run.checkpoint_every",
    "algo.k",
    "algo.gamma",
    "algo.tau",
    "algo.actor_delay",
    "algo.alpha",
    "algo.noise_sigma",
    "algo.actor_lr",
    "algo.critic_lr",
    "algo.her_fraction",
    "algo.target_update",
    "algo.clip_target",
    "algo.target_smoothing",
    "algo.smoothing_sigma",
    "algo.smoothing_clip",
    "net.variant",
    "net.d_model",
    "net.heads",
    "net.ff_hidden",
    "net.fc_hidden",
    "net.output_scale",
    "arm.kind",
    "arm.joints",
    "task.kind",
    "task.goal_threshold",
    "task.obstacle_threshold",
    "task.update_period",
    "task.episode_len",
    "task.gain_scale",
    "task.goal_r_min",
    "task.goal_r_max",
    "task.goal_h_min",
    "task.goal_h_max",
    "task.obstacle_height_min",
    "task.obstacle_height_max",
    "task.obstacle_jitter",
    "task.sinusoid_period",
    "task.sinusoid_amp_min",
    "task.sinusoid_amp_max",
    "task.circle_period",
    "task.circle_radius_min",
    "task.circle_radius_max",
    "task.circle_radius_step",
    "task.spiral_period",
    "task.spiral_half_height",
    "task.spiral_amp_min",
    "task.spiral_amp_max",
    "task.spiral_amp_step",
];

/// Full name of `key`; a bare key resolves to `run.key`, then `algo.key`,
/// then the only section holding it.
pub fn resolve_key(key: &str) -> Result<String, TrainError> {
    let unknown = || TrainError::UnknownKey {
        key: key.to_string(),
        valid: KEYS.join(", "),
    };
    if KEYS.contains(&key) {
        return Ok(key.to_string());
    }
    if key.contains('.') {
        return Err(unknown());
    }
    for section in ["run", "algo"] {
        let full = format!("{section}.{key}");
        if KEYS.contains(&full.as_str()) {
            return Ok(full);
        }
    }
    let mut hits = KEYS.iter().filter(|k| k.split_once('.').map(|(_, b)| b) == Some(key));
    match (hits.next(), hits.next()) {
        (Some(k), None) => Ok(k.to_string()),
        _ => Err(unknown()),
    }
}

/// Splits config text into `(section.key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        let full = if section.is_empty() || key.contains('.') { key.to_string() } else { format!("{section}.{key}") };
        out.push((full, value.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), TrainError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| TrainError::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
