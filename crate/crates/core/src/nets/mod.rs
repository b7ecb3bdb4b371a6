//! Actor and twin-critic networks built on a single transformer block each.
//!
//! Both networks read a batch of context windows stacked row-wise: window
//! `b` occupies rows `b·(K+1) .. (b+1)·(K+1)`, each row an
//! `observation ⧺ goal` vector, oldest step first. The `V1` wiring
//! concatenates the raw final row onto the block output before the fully
//! connected stack; `V0` feeds the block output alone.

mod checkpoint;
mod layers;
mod trxl;

pub use checkpoint::{load_records, read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{FcStack, LayerNormParams, Linear};
pub use trxl::TrxlBlock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndnum::{NdError, Tensor};
use trxl::last_rows;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("network config: {0}")]
    Config(String),
    #[error("window batch must be [B·{expected_rows}, {expected_cols}], got {got:?}")]
    WindowShape {
        expected_rows: usize,
        expected_cols: usize,
        got: Vec<usize>,
    },
    #[error("action batch must be [{rows}, {cols}], got {got:?}")]
    ActionShape { rows: usize, cols: usize, got: Vec<usize> },
    #[error("non-finite value in {what} at element {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("parameter trees differ: {0}")]
    ParamTree(String),
    #[error("soft-update rate must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetVariant {
    /// Block output only.
    V0,
    /// Block output concatenated with the raw final window row.
    V1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub fc_hidden: usize,
    /// Init scale of the final layer of each head.
    pub output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            ff_hidden: 128,
            fc_hidden: 128,
            output_scale: 0.01,
        }
    }
}

/// Ordered, named parameter handles.
pub type ParamList = Vec<(String, Tensor)>;

fn check_finite(what: &'static str, t: &Tensor) -> Result<(), NetError> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NetError::NonFinite { what, index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct ActorNet {
    pub block: TrxlBlock,
    pub fc: FcStack,
    pub variant: NetVariant,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        window_len: usize,
        action_dim: usize,
        variant: NetVariant,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let block = TrxlBlock::new(input_dim, window_len, cfg, rng)?;
        let fc_in = cfg.d_model + if variant == NetVariant::V1 { input_dim } else { 0 };
        let fc = FcStack::new(fc_in, cfg.fc_hidden, action_dim, cfg.output_scale, rng);
        Ok(Self { block, fc, variant })
    }

    pub fn input_dim(&self) -> usize {
        self.block.input_dim()
    }

    pub fn window_len(&self) -> usize {
        self.block.window_len()
    }

    pub fn action_dim(&self) -> usize {
        self.fc.layers[2].output_dim()
    }

    /// Actions in `[−1, 1]` for each window: `[B·(K+1), d_in] → [B, J]`.
    pub fn forward(&self, windows: &Tensor) -> Result<Tensor, NetError> {
        check_finite("actor input", windows)?;
        let features = head_input(&self.block, self.variant, windows, None)?;
        Ok(self.fc.forward(&features)?.tanh())
    }

    pub fn params(&self) -> ParamList {
        let mut out = Vec::new();
        self.block.collect("actor.block", &mut out);
        self.fc.collect("actor.head", &mut out);
        out
    }

    /// Independent copy with trainable parameters.
    pub fn deep_copy(&self) -> Self {
        let mut c = self.clone();
        c.block = map_block(&self.block, Tensor::deep_clone);
        c.fc = map_fc(&self.fc, Tensor::deep_clone);
        c
    }
}

#[derive(Debug, Clone)]
pub struct CriticNet {
    pub blocks: [TrxlBlock; 2],
    pub heads: [FcStack; 2],
    pub variant: NetVariant,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        window_len: usize,
        action_dim: usize,
        variant: NetVariant,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let fc_in = cfg.d_model + action_dim + if variant == NetVariant::V1 { input_dim } else { 0 };
        let b1 = TrxlBlock::new(input_dim, window_len, cfg, rng)?;
        let h1 = FcStack::new(fc_in, cfg.fc_hidden, 1, cfg.output_scale, rng);
        let b2 = TrxlBlock::new(input_dim, window_len, cfg, rng)?;
        let h2 = FcStack::new(fc_in, cfg.fc_hidden, 1, cfg.output_scale, rng);
        Ok(Self {
            blocks: [b1, b2],
            heads: [h1, h2],
            variant,
        })
    }

    pub fn action_dim(&self) -> usize {
        let extra = if self.variant == NetVariant::V1 { self.blocks[0].input_dim() } else { 0 };
        self.heads[0].input_dim() - self.blocks[0].d_model() - extra
    }

    /// Two Q estimates, each `[B, 1]`, for the final action of every window.
    pub fn forward(&self, windows: &Tensor, actions: &Tensor) -> Result<(Tensor, Tensor), NetError> {
        check_finite("critic input", windows)?;
        check_finite("critic action", actions)?;
        let q1 = self.heads[0].forward(&head_input(&self.blocks[0], self.variant, windows, Some(actions))?)?;
        let q2 = self.heads[1].forward(&head_input(&self.blocks[1], self.variant, windows, Some(actions))?)?;
        Ok((q1, q2))
    }

    pub fn params(&self) -> ParamList {
        let mut out = Vec::new();
        for i in 0..2 {
            self.blocks[i].collect(&format!("critic{}.block", i + 1), &mut out);
            self.heads[i].collect(&format!("critic{}.head", i + 1), &mut out);
        }
        out
    }

    pub fn deep_copy(&self) -> Self {
        self.map(Tensor::deep_clone)
    }

    /// Constant copy: gradients still flow to the inputs but never reach
    /// these parameters.
    pub fn frozen(&self) -> Self {
        self.map(Tensor::detach)
    }

    fn map(&self, f: fn(&Tensor) -> Tensor) -> Self {
        Self {
            blocks: [map_block(&self.blocks[0], f), map_block(&self.blocks[1], f)],
            heads: [map_fc(&self.heads[0], f), map_fc(&self.heads[1], f)],
            variant: self.variant,
        }
    }
}

fn head_input(block: &TrxlBlock, variant: NetVariant, windows: &Tensor, actions: Option<&Tensor>) -> Result<Tensor, NetError> {
    let h = block.forward_last(windows)?;
    let batch = h.shape()[0];
    let mut parts = vec![h];
    if variant == NetVariant::V1 {
        parts.push(windows.gather_rows(&last_rows(batch, block.window_len()))?);
    }
    if let Some(a) = actions {
        let shape = a.shape();
        if shape.len() != 2 || shape[0] != batch {
            return Err(NetError::ActionShape {
                rows: batch,
                cols: shape.last().copied().unwrap_or(0),
                got: shape,
            });
        }
        parts.push(a.clone());
    }
    Ok(if parts.len() == 1 { parts.pop().expect("one part") } else { Tensor::concat_cols(&parts)? })
}

fn map_linear(l: &Linear, f: fn(&Tensor) -> Tensor) -> Linear {
    Linear {
        weight: f(&l.weight),
        bias: f(&l.bias),
    }
}

fn map_ln(l: &LayerNormParams, f: fn(&Tensor) -> Tensor) -> LayerNormParams {
    LayerNormParams {
        gain: f(&l.gain),
        bias: f(&l.bias),
    }
}

fn map_fc(s: &FcStack, f: fn(&Tensor) -> Tensor) -> FcStack {
    FcStack {
        layers: [map_linear(&s.layers[0], f), map_linear(&s.layers[1], f), map_linear(&s.layers[2], f)],
    }
}

fn map_block(b: &TrxlBlock, f: fn(&Tensor) -> Tensor) -> TrxlBlock {
    let mut c = b.clone();
    c.embed = map_linear(&b.embed, f);
    c.positions = f(&b.positions);
    c.ln_attn = map_ln(&b.ln_attn, f);
    c.query = map_linear(&b.query, f);
    c.key = map_linear(&b.key, f);
    c.value = map_linear(&b.value, f);
    c.attn_out = map_linear(&b.attn_out, f);
    c.ln_ff = map_ln(&b.ln_ff, f);
    c.ff_in = map_linear(&b.ff_in, f);
    c.ff_out = map_linear(&b.ff_out, f);
    c
}

fn check_trees(target: &[(String, Tensor)], source: &[(String, Tensor)]) -> Result<(), NetError> {
    if target.len() != source.len() {
        return Err(NetError::ParamTree(format!("{} vs {} tensors", target.len(), source.len())));
    }
    for ((tn, t), (sn, s)) in target.iter().zip(source) {
        if tn != sn || t.shape() != s.shape() {
            return Err(NetError::ParamTree(format!("`{tn}` {:?} vs `{sn}` {:?}", t.shape(), s.shape())));
        }
    }
    Ok(())
}

/// `θ' ← τθ + (1−τ)θ'` for every paired tensor.
pub fn soft_update(target: &[(String, Tensor)], source: &[(String, Tensor)], tau: f64) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NetError::InvalidTau(tau));
    }
    check_trees(target, source)?;
    for ((_, t), (_, s)) in target.iter().zip(source) {
        let src = s.to_vec();
        t.with_data_mut(|d| {
            for (x, y) in d.iter_mut().zip(&src) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        });
    }
    Ok(())
}

/// Copies values from `source` into `target` (same names and shapes).
pub fn copy_params(target: &[(String, Tensor)], source: &[(String, Tensor)]) -> Result<(), NetError> {
    check_trees(target, source)?;
    for ((_, t), (_, s)) in target.iter().zip(source) {
        t.set_data(s.to_vec())?;
    }
    Ok(())
}

/// Row-stacks window rows into the `[B·(K+1), d_in]` layout.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Tensor, NetError> {
    Ok(Tensor::from_rows(rows)?)
}
