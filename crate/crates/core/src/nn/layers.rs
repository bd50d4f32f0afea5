//! Network building blocks with hand-written backward passes.
//!
//! Every forward returns a cache holding exactly what its backward needs;
//! backwards accumulate parameter gradients into the [`ParamStore`] and
//! return the gradient with respect to their input. All passes are
//! deterministic. The derivatives here are the load-bearing part of the
//! training stack, and each one is held to a finite-difference check in the
//! test module below.

use rand::Rng;
use thiserror::Error;

use super::array::{ArrayError, NumArray};
use super::params::{ParamError, ParamId, ParamStore};
use crate::Real;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("input has {got} columns, layer expects {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("embedding index {index} out of range for table of {rows}")]
    EmbeddingOutOfRange { index: usize, rows: usize },
}

/// Sinusoidal features: each scalar `x` maps to
/// `[sin(2^k x), cos(2^k x)]` for `k = 0..num_frequencies`,
/// giving a `[values.len(), 2 * num_frequencies]` array.
pub fn fourier_embed(values: &[Real], num_frequencies: usize) -> NumArray {
    let mut out = NumArray::zeros(&[values.len(), 2 * num_frequencies]);
    for (i, &x) in values.iter().enumerate() {
        let row = out.row_mut(i);
        for k in 0..num_frequencies {
            let arg = (1u64 << k) as Real * x;
            row[2 * k] = arg.sin();
            row[2 * k + 1] = arg.cos();
        }
    }
    out
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

/// Cached forward input for [`Dense::backward`].
pub struct DenseCache {
    input: NumArray,
}

impl Dense {
    /// Registers a dense layer with `1/sqrt(in_dim)`-scaled normal weights.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let scale = 1.0 / (in_dim as Real).sqrt();
        let w = store.register_normal(&format!("{name}.w"), &[in_dim, out_dim], scale, rng)?;
        let b = store.register(&format!("{name}.b"), NumArray::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Output head variant: weights and bias start at zero so the network's
    /// initial prediction is exactly zero.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, LayerError> {
        let w = store.register(&format!("{name}.w"), NumArray::zeros(&[in_dim, out_dim]))?;
        let b = store.register(&format!("{name}.b"), NumArray::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &NumArray,
    ) -> Result<(NumArray, DenseCache), LayerError> {
        let (_, cols) = input.dims2()?;
        if cols != self.in_dim {
            return Err(LayerError::WidthMismatch {
                got: cols,
                expected: self.in_dim,
            });
        }
        let mut out = input.matmul(store.value(self.w))?;
        let bias = store.value(self.b).as_slice();
        let (rows, _) = out.dims2()?;
        for r in 0..rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok((
            out,
            DenseCache {
                input: input.clone(),
            },
        ))
    }

    /// Accumulates `dW = x^T d`, `db = sum_rows d`; returns `dx = d W^T`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DenseCache,
        upstream: &NumArray,
    ) -> Result<NumArray, LayerError> {
        let dw = cache.input.matmul_tn(upstream)?;
        store.grad_mut(self.w).add_assign(&dw)?;
        let (rows, _) = upstream.dims2()?;
        {
            let db = store.grad_mut(self.b).as_mut_slice();
            for r in 0..rows {
                for (g, u) in db.iter_mut().zip(upstream.row(r)) {
                    *g += u;
                }
            }
        }
        Ok(upstream.matmul_nt(store.value(self.w))?)
    }
}

/// Elementwise `tanh`. The cache is the output itself.
pub fn tanh_forward(input: &NumArray) -> NumArray {
    let mut out = input.clone();
    for v in out.as_mut_slice() {
        *v = v.tanh();
    }
    out
}

/// `dx = d * (1 - y^2)` given the forward output `y`.
pub fn tanh_backward(output: &NumArray, upstream: &NumArray) -> Result<NumArray, ArrayError> {
    let mut out = upstream.clone();
    if out.shape() != output.shape() {
        return Err(ArrayError::ShapeMismatch {
            a: out.shape().to_vec(),
            b: output.shape().to_vec(),
        });
    }
    for (d, y) in out.as_mut_slice().iter_mut().zip(output.as_slice()) {
        *d *= 1.0 - y * y;
    }
    Ok(out)
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    dim: usize,
    eps: Real,
}

/// Normalized rows and per-row scale, cached for the backward pass.
pub struct LayerNormCache {
    normalized: NumArray,
    inv_std: Vec<Real>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, LayerError> {
        let mut ones = NumArray::zeros(&[dim]);
        ones.as_mut_slice().fill(1.0);
        let gain = store.register(&format!("{name}.gain"), ones)?;
        let bias = store.register(&format!("{name}.bias"), NumArray::zeros(&[dim]))?;
        Ok(Self {
            gain,
            bias,
            dim,
            eps: 1e-6,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &NumArray,
    ) -> Result<(NumArray, LayerNormCache), LayerError> {
        let (rows, cols) = input.dims2()?;
        if cols != self.dim {
            return Err(LayerError::WidthMismatch {
                got: cols,
                expected: self.dim,
            });
        }
        let gain = store.value(self.gain).as_slice();
        let bias = store.value(self.bias).as_slice();
        let mut out = NumArray::zeros(&[rows, cols]);
        let mut normalized = NumArray::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = input.row(r);
            let mean = x.iter().sum::<Real>() / cols as Real;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let n_row = normalized.row_mut(r);
            for (i, &v) in x.iter().enumerate() {
                n_row[i] = (v - mean) * inv;
            }
            let o_row = out.row_mut(r);
            for i in 0..cols {
                o_row[i] = gain[i] * n_row[i] + bias[i];
            }
        }
        Ok((
            out,
            LayerNormCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        upstream: &NumArray,
    ) -> Result<NumArray, LayerError> {
        let (rows, cols) = upstream.dims2()?;
        let mut dx = NumArray::zeros(&[rows, cols]);
        {
            let gain = store.value(self.gain).as_slice().to_vec();
            for r in 0..rows {
                let d = upstream.row(r);
                let xn = cache.normalized.row(r);
                let inv = cache.inv_std[r];
                // d_normalized = d * gain; remove its mean and its projection
                // onto the normalized direction.
                let dn: Vec<Real> = d.iter().zip(&gain).map(|(u, g)| u * g).collect();
                let mean_dn = dn.iter().sum::<Real>() / cols as Real;
                let mean_dn_xn = dn.iter().zip(xn).map(|(a, b)| a * b).sum::<Real>() / cols as Real;
                let row = dx.row_mut(r);
                for i in 0..cols {
                    row[i] = inv * (dn[i] - mean_dn - xn[i] * mean_dn_xn);
                }
            }
        }
        {
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let d = upstream.row(r);
                let xn = cache.normalized.row(r);
                for i in 0..cols {
                    dgain[i] += d[i] * xn[i];
                    dbias[i] += d[i];
                }
            }
            for (g, v) in store
                .grad_mut(self.gain)
                .as_mut_slice()
                .iter_mut()
                .zip(&dgain)
            {
                *g += v;
            }
            for (g, v) in store
                .grad_mut(self.bias)
                .as_mut_slice()
                .iter_mut()
                .zip(&dbias)
            {
                *g += v;
            }
        }
        Ok(dx)
    }
}

/// Learned lookup table; rows are embeddings.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    rows: usize,
    dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let table = store.register_normal(&format!("{name}.table"), &[rows, dim], 0.1, rng)?;
        Ok(Self { table, rows, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, store: &ParamStore, index: usize) -> Result<Vec<Real>, LayerError> {
        if index >= self.rows {
            return Err(LayerError::EmbeddingOutOfRange {
                index,
                rows: self.rows,
            });
        }
        Ok(store.value(self.table).row(index).to_vec())
    }

    /// Scatter-add of the upstream gradient into the looked-up row.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        index: usize,
        upstream: &[Real],
    ) -> Result<(), LayerError> {
        if index >= self.rows {
            return Err(LayerError::EmbeddingOutOfRange {
                index,
                rows: self.rows,
            });
        }
        let row = store.grad_mut(self.table).row_mut(index);
        for (g, u) in row.iter_mut().zip(upstream) {
            *g += u;
        }
        Ok(())
    }
}

/// Attention weights and inputs cached for the backward pass.
pub struct AttnCache {
    q: NumArray,
    k: NumArray,
    v: NumArray,
    /// Softmax rows, `[n, n]`.
    weights: NumArray,
}

impl AttnCache {
    #[cfg(test)]
    pub(crate) fn weights(&self) -> &NumArray {
        &self.weights
    }
}

/// Single-head scaled dot-product attention over one token set:
/// `out = softmax(q k^T / sqrt(d)) v` with `q, k, v` of shape `[n, d]`.
pub fn attention_forward(
    q: &NumArray,
    k: &NumArray,
    v: &NumArray,
) -> Result<(NumArray, AttnCache), LayerError> {
    let (n, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if nk != n || nv != n || dk != d {
        return Err(LayerError::Array(ArrayError::ShapeMismatch {
            a: q.shape().to_vec(),
            b: k.shape().to_vec(),
        }));
    }
    let scale = 1.0 / (d as Real).sqrt();
    let mut scores = q.matmul_nt(k)?;
    scores.scale(scale);
    // Row softmax with max subtraction for stability.
    let mut weights = scores;
    for r in 0..n {
        let row = weights.row_mut(r);
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    let out = weights.matmul(v)?;
    Ok((
        out,
        AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
        },
    ))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
pub fn attention_backward(
    cache: &AttnCache,
    upstream: &NumArray,
) -> Result<(NumArray, NumArray, NumArray), LayerError> {
    let (n, d) = cache.q.dims2()?;
    let scale = 1.0 / (d as Real).sqrt();
    let dv = cache.weights.matmul_tn(upstream)?;
    let da = upstream.matmul_nt(&cache.v)?;
    // Softmax Jacobian per row: ds = a * (da - sum(a * da)).
    let mut ds = NumArray::zeros(&[n, n]);
    for r in 0..n {
        let a = cache.weights.row(r);
        let g = da.row(r);
        let dot: Real = a.iter().zip(g).map(|(x, y)| x * y).sum();
        let row = ds.row_mut(r);
        for i in 0..n {
            row[i] = a[i] * (g[i] - dot);
        }
    }
    let mut dq = ds.matmul(&cache.k)?;
    dq.scale(scale);
    let mut dk = ds.matmul_tn(&cache.q)?;
    dk.scale(scale);
    Ok((dq, dk, dv))
}
