use rand::Rng;

use super::layers::{LayerNormParams, Linear};
use super::{NetConfig, NetError};
use crate::ndnum::{NdError, Tensor};

/// Transformer block with identity-map reordering: each sublayer sees a
/// layer-normalized input and its output is added onto the un-normalized
/// stream.
///
/// ```text
/// e = embed(x) + pos
/// h = e + W_o · MHA(LN₁(e))
/// y = h + FF(LN₂(h))
/// ```
///
/// Every window position attends to every other position of the same
/// window; there is no causal mask.
#[derive(Debug, Clone)]
pub struct TrxlBlock {
    pub embed: Linear,
    pub positions: Tensor,
    pub ln_attn: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_ff: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    heads: usize,
}

impl TrxlBlock {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, window_len: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self, NetError> {
        let d = cfg.d_model;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(NetError::Config(format!("d_model {d} is not divisible by {} heads", cfg.heads)));
        }
        if window_len == 0 || input_dim == 0 {
            return Err(NetError::Config("window length and input width must be positive".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let pos = (0..window_len * d).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            embed: Linear::new(input_dim, d, 1.0, rng),
            positions: Tensor::param(&[window_len, d], pos)?,
            ln_attn: LayerNormParams::new(d),
            query: Linear::new(d, d, 1.0, rng),
            key: Linear::new(d, d, 1.0, rng),
            value: Linear::new(d, d, 1.0, rng),
            attn_out: Linear::new(d, d, 1.0, rng),
            ln_ff: LayerNormParams::new(d),
            ff_in: Linear::new(d, cfg.ff_hidden, 1.0, rng),
            ff_out: Linear::new(cfg.ff_hidden, d, 1.0, rng),
            heads: cfg.heads,
        })
    }

    pub fn window_len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn check_rows(&self, x: &Tensor) -> Result<usize, NetError> {
        let shape = x.shape();
        let len = self.window_len();
        if shape.len() != 2 || shape[1] != self.input_dim() || shape[0] % len != 0 {
            return Err(NetError::WindowShape {
                expected_rows: len,
                expected_cols: self.input_dim(),
                got: shape,
            });
        }
        Ok(shape[0] / len)
    }

    fn embedded(&self, x: &Tensor) -> Result<Tensor, NdError> {
        self.embed.forward(x)?.add_tiled(&self.positions)
    }

    fn feed_forward(&self, h: &Tensor) -> Result<Tensor, NdError> {
        let n = self.ln_ff.forward(h)?;
        let f = self.ff_out.forward(&self.ff_in.forward(&n)?.silu())?;
        h.add(&f)
    }

    /// Full block output for windows stacked row-wise: `[B·(K+1), d_in] → [B·(K+1), d_model]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let windows = self.check_rows(x)?;
        let e = self.embedded(x)?;
        let n = self.ln_attn.forward(&e)?;
        let a = Tensor::attention(&self.query.forward(&n)?, &self.key.forward(&n)?, &self.value.forward(&n)?, windows, self.heads)?;
        let h = e.add(&self.attn_out.forward(&a)?)?;
        Ok(self.feed_forward(&h)?)
    }

    /// Output rows at the final position of each window only: `[B, d_model]`.
    /// Equal to the matching rows of [`TrxlBlock::forward`].
    pub fn forward_last(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let windows = self.check_rows(x)?;
        let last = last_rows(windows, self.window_len());
        let e = self.embedded(x)?;
        let n = self.ln_attn.forward(&e)?;
        let q = self.query.forward(&n.gather_rows(&last)?)?;
        let a = Tensor::attention(&q, &self.key.forward(&n)?, &self.value.forward(&n)?, windows, self.heads)?;
        let h = e.gather_rows(&last)?.add(&self.attn_out.forward(&a)?)?;
        Ok(self.feed_forward(&h)?)
    }

    /// Zeroes every attention and feed-forward weight, leaving the residual path.
    pub fn zero_sublayers(&self) {
        for l in [&self.query, &self.key, &self.value, &self.attn_out, &self.ff_in, &self.ff_out] {
            l.zero();
        }
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.embed.collect(&format!("{prefix}.embed"), out);
        out.push((format!("{prefix}.positions"), self.positions.clone()));
        self.ln_attn.collect(&format!("{prefix}.ln_attn"), out);
        self.query.collect(&format!("{prefix}.query"), out);
        self.key.collect(&format!("{prefix}.key"), out);
        self.value.collect(&format!("{prefix}.value"), out);
        self.attn_out.collect(&format!("{prefix}.attn_out"), out);
        self.ln_ff.collect(&format!("{prefix}.ln_ff"), out);
        self.ff_in.collect(&format!("{prefix}.ff_in"), out);
        self.ff_out.collect(&format!("{prefix}.ff_out"), out);
    }
}

pub(crate) fn last_rows(windows: usize, len: usize) -> Vec<usize> {
    (0..windows).map(|w| w * len + len - 1).collect()
}
