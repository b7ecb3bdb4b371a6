//! Differentiable primitives. Each forward op stores what its backward rule
//! needs in an [`Op`] record; [`Op::backward`] maps the output gradient to
//! per-parent gradients.

use super::gemm::gemm;
use super::tensor::Tensor;
use super::NdError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    AddRowBias(Tensor, Tensor),
    AddTiled(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Minimum(Tensor, Tensor),
    Scale(Tensor, f64),
    Silu(Tensor),
    Tanh(Tensor),
    Square(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Reshape(Tensor),
    ConcatCols(Vec<Tensor>),
    GatherRows {
        x: Tensor,
        rows: Vec<usize>,
    },
    Softmax {
        x: Tensor,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        geom: AttnGeom,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    windows: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
    head_dim: usize,
    scale: f64,
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        use Op::*;
        match self {
            MatMul(a, b) | AddRowBias(a, b) | AddTiled(a, b) | Add(a, b) | Sub(a, b)
            | Mul(a, b) | Minimum(a, b) => vec![a.clone(), b.clone()],
            Scale(a, _) | Silu(a) | Tanh(a) | Square(a) | Sum(a) | Mean(a) | Reshape(a) => {
                vec![a.clone()]
            }
            ConcatCols(xs) => xs.clone(),
            GatherRows { x, .. } | Softmax { x, .. } => vec![x.clone()],
            LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
            Attention { q, k, v, .. } => vec![q.clone(), k.clone(), v.clone()],
        }
    }

    /// Gradients for each parent given the op's output values and the
    /// gradient flowing into that output.
    pub(crate) fn backward(&self, out: &[f64], g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        use Op::*;
        match self {
            MatMul(a, b) => {
                let (sa, sb) = (a.shape(), b.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::with_capacity(2);
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b.data(), true, 0.0, &mut ga);
                    res.push((a.clone(), ga));
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a.data(), true, g, false, 0.0, &mut gb);
                    res.push((b.clone(), gb));
                }
                res
            }
            AddRowBias(x, b) => {
                let n = b.len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                vec![(x.clone(), g.to_vec()), (b.clone(), gb)]
            }
            AddTiled(x, t) => {
                let tn = t.len();
                let mut gt = vec![0.0; tn];
                for chunk in g.chunks(tn) {
                    gt.iter_mut().zip(chunk).for_each(|(a, r)| *a += r);
                }
                vec![(x.clone(), g.to_vec()), (t.clone(), gt)]
            }
            Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
            Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let ga = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Minimum(a, b) => {
                // Ties route the gradient to the first argument.
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if ad[i] <= bd[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Scale(a, s) => vec![(a.clone(), g.iter().map(|v| v * s).collect())],
            Silu(x) => {
                let xd = x.data();
                let gx = xd
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                vec![(x.clone(), gx)]
            }
            Tanh(x) => vec![(x.clone(), out.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect())],
            Square(x) => {
                let gx = x.data().iter().zip(g).map(|(x, g)| 2.0 * x * g).collect();
                vec![(x.clone(), gx)]
            }
            Sum(x) => vec![(x.clone(), vec![g[0]; x.len()])],
            Mean(x) => {
                let n = x.len();
                vec![(x.clone(), vec![g[0] / n as f64; n])]
            }
            Reshape(x) => vec![(x.clone(), g.to_vec())],
            ConcatCols(xs) => {
                let widths: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * rows)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (gi, &w) in grads.iter_mut().zip(&widths) {
                        gi.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                xs.iter().cloned().zip(grads).collect()
            }
            GatherRows { x, rows } => {
                let cols = x.shape()[1];
                let mut gx = vec![0.0; x.len()];
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g[i * cols..(i + 1) * cols];
                    gx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![(x.clone(), gx)]
            }
            Softmax { x, outer, axis_len, inner } => {
                let mut gx = vec![0.0; out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * axis_len + a) * inner + i;
                        let dot: f64 = (0..*axis_len).map(|a| out[idx(a)] * g[idx(a)]).sum();
                        for a in 0..*axis_len {
                            gx[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                vec![(x.clone(), gx)]
            }
            LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = gain.len();
                let gd = gain.data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let row = r * n..(r + 1) * n;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        gx[r * n + j] = inv / nf * (nf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                vec![(x.clone(), gx), (gain.clone(), ggain), (bias.clone(), gbias)]
            }
            Attention { q, k, v, geom, probs } => attention_backward(q, k, v, geom, probs, g),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<(), NdError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(NdError::ShapeMismatch { left: sa, right: sb });
    }
    Ok(())
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize), NdError> {
    match t.shape()[..] {
        [r, c] => Ok((r, c)),
        ref s => Err(NdError::NotMatrix(s.to_vec())),
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape(), data, op)
}

fn zip_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor, NdError> {
    check_same_shape(a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_op(a.shape(), data, op))
}

impl Tensor {
    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NdError> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(other)?;
        if k != k2 {
            return Err(NdError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, 0.0, &mut c);
        Ok(Tensor::from_op(vec![m, n], c, Op::MatMul(self.clone(), other.clone())))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor, NdError> {
        let (_, n) = matrix_dims(self)?;
        if bias.len() != n {
            return Err(NdError::ShapeMismatch {
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(x, b)| *x += b);
            }
        }
        Ok(Tensor::from_op(self.shape(), data, Op::AddRowBias(self.clone(), bias.clone())))
    }

    /// Adds `tile: [p,n]` to consecutive `p`-row blocks of `self: [m·p, n]`.
    pub fn add_tiled(&self, tile: &Tensor) -> Result<Tensor, NdError> {
        let (rows, n) = matrix_dims(self)?;
        let (p, tn) = matrix_dims(tile)?;
        if tn != n || rows % p != 0 {
            return Err(NdError::ShapeMismatch {
                left: self.shape(),
                right: tile.shape(),
            });
        }
        let mut data = self.to_vec();
        {
            let t = tile.data();
            for block in data.chunks_mut(p * n) {
                block.iter_mut().zip(t.iter()).for_each(|(x, t)| *x += t);
            }
        }
        Ok(Tensor::from_op(self.shape(), data, Op::AddTiled(self.clone(), tile.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NdError> {
        zip_binary(self, other, |a, b| a + b, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NdError> {
        zip_binary(self, other, |a, b| a - b, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NdError> {
        zip_binary(self, other, |a, b| a * b, Op::Mul(self.clone(), other.clone()))
    }

    /// Elementwise minimum.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor, NdError> {
        zip_binary(self, other, f64::min, Op::Minimum(self.clone(), other.clone()))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        map_unary(self, |v| v * s, Op::Scale(self.clone(), s))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        map_unary(self, |v| v * sigmoid(v), Op::Silu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        map_unary(self, f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        map_unary(self, |v| v * v, Op::Square(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s / n], Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NdError> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(NdError::ShapeMismatch {
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, NdError> {
        let first = parts.first().ok_or(NdError::EmptyConcat)?;
        let (rows, _) = matrix_dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = matrix_dims(p)?;
            if r != rows {
                return Err(NdError::ShapeMismatch {
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (d, &w) in datas.iter().zip(&widths) {
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(vec![rows, total], data, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor, NdError> {
        let (m, n) = matrix_dims(self)?;
        if rows.is_empty() {
            return Err(NdError::EmptyConcat);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(NdError::IndexOutOfRange { index: bad, len: m });
        }
        let d = self.data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        drop(d);
        Ok(Tensor::from_op(
            vec![rows.len(), n],
            data,
            Op::GatherRows {
                x: self.clone(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, NdError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(NdError::AxisOutOfRange { axis, ndim: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_len + a) * inner + i;
                let max = (0..axis_len).map(|a| x[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..axis_len {
                    let e = (x[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] /= total;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Softmax {
                x: self.clone(),
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor, NdError> {
        let shape = self.shape();
        let n = *shape.last().expect("tensor shape is never empty");
        if gain.len() != n || bias.len() != n {
            return Err(NdError::ShapeMismatch {
                left: shape,
                right: gain.shape(),
            });
        }
        let x = self.data();
        let rows = x.len() / n;
        let (gd, bd) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        drop((x, gd, bd));
        Ok(Tensor::from_op(
            shape,
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention over independent windows, no mask.
    ///
    /// `q: [windows·q_len, d]`, `k, v: [windows·kv_len, d]`; `d` is split
    /// into `heads` contiguous slices. Query rows of window `w` attend to
    /// every key row of the same window.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, windows: usize, heads: usize) -> Result<Tensor, NdError> {
        let (qr, d) = matrix_dims(q)?;
        let (kr, kd) = matrix_dims(k)?;
        check_same_shape(k, v)?;
        if kd != d || heads == 0 || d % heads != 0 || windows == 0 || qr % windows != 0 || kr % windows != 0 {
            return Err(NdError::ShapeMismatch {
                left: q.shape(),
                right: k.shape(),
            });
        }
        let head_dim = d / heads;
        let geom = AttnGeom {
            windows,
            q_len: qr / windows,
            kv_len: kr / windows,
            heads,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        let (qd, kd_, vd) = (q.data(), k.data(), v.data());
        let mut probs = vec![0.0; windows * heads * geom.q_len * geom.kv_len];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; geom.kv_len];
        for w in 0..windows {
            for h in 0..heads {
                let col = h * head_dim;
                for i in 0..geom.q_len {
                    let qrow = &qd[(w * geom.q_len + i) * d + col..][..head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd_[(w * geom.kv_len + j) * d + col..][..head_dim];
                        *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * geom.scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let pbase = ((w * heads + h) * geom.q_len + i) * geom.kv_len;
                    let orow = (w * geom.q_len + i) * d + col;
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / total;
                        probs[pbase + j] = p;
                        let vrow = &vd[(w * geom.kv_len + j) * d + col..][..head_dim];
                        for (o, vv) in out[orow..orow + head_dim].iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        drop((qd, kd_, vd));
        Ok(Tensor::from_op(
            vec![qr, d],
            out,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                geom,
                probs,
            },
        ))
    }
}

fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, geom: &AttnGeom, probs: &[f64], g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let d = geom.heads * geom.head_dim;
    let hd = geom.head_dim;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; geom.kv_len];
    for w in 0..geom.windows {
        for h in 0..geom.heads {
            let col = h * hd;
            for i in 0..geom.q_len {
                let qoff = (w * geom.q_len + i) * d + col;
                let grow = &g[qoff..qoff + hd];
                let pbase = ((w * geom.heads + h) * geom.q_len + i) * geom.kv_len;
                let p = &probs[pbase..pbase + geom.kv_len];
                let mut dot = 0.0;
                for j in 0..geom.kv_len {
                    let voff = (w * geom.kv_len + j) * d + col;
                    let vrow = &vd[voff..voff + hd];
                    dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    for (gvv, gg) in gv[voff..voff + hd].iter_mut().zip(grow) {
                        *gvv += p[j] * gg;
                    }
                }
                for j in 0..geom.kv_len {
                    let ds = p[j] * (dp[j] - dot) * geom.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (w * geom.kv_len + j) * d + col;
                    for t in 0..hd {
                        gq[qoff + t] += ds * kd[koff + t];
                        gk[koff + t] += ds * qd[qoff + t];
                    }
                }
            }
        }
    }
    drop((qd, kd, vd));
    vec![(q.clone(), gq), (k.clone(), gk), (v.clone(), gv)]
}
