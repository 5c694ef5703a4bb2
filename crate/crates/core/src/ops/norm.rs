//! Per-token layer normalization over the channel axis.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Normalized rows and the per-row `1/√(var + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

impl NormCache {
    pub fn numel(&self) -> usize {
        self.xhat.numel() + self.inv_std.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub dgamma: Tensor,
    pub dbeta: Tensor,
    pub dx: Tensor,
}

impl LayerNorm {
    pub fn new(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.numel() != beta.numel() || gamma.numel() == 0 {
            return Err(dim_err!("gamma has {} entries, beta {}", gamma.numel(), beta.numel()));
        }
        Ok(LayerNorm { gamma, beta })
    }

    pub fn identity(c: usize) -> Self {
        LayerNorm { gamma: Tensor::filled([c], 1.0), beta: Tensor::zeros([c]) }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

pub fn layer_norm_forward(ln: &LayerNorm, x: &Tensor) -> Result<(Tensor, NormCache)> {
    let c = ln.channels();
    if x.cols() != c {
        return Err(dim_err!("layer norm over {c} channels got {} columns", x.cols()));
    }
    let xm = x.as_matrix();
    let mut xhat = xm.clone();
    let mut out = xm.clone();
    let mut inv_std = Vec::with_capacity(xm.rows());
    for i in 0..xm.rows() {
        let row = xm.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let (g, b) = (ln.gamma.data(), ln.beta.data());
        for (j, (h, o)) in xhat.row_mut(i).iter_mut().zip(out.row_mut(i)).enumerate() {
            *h = (row[j] - mean) * is;
            *o = *h * g[j] + b[j];
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

/// `dx = inv_std/C · (C·g − Σg − x̂·Σ(g·x̂))` with `g = dy ⊙ γ`.
pub fn layer_norm_backward(ln: &LayerNorm, cache: &NormCache, upstream: &Tensor) -> Result<NormGrads> {
    let c = ln.channels();
    let up = upstream.as_matrix();
    if up.rows() != cache.xhat.rows() || up.cols() != c {
        return Err(dim_err!("layer norm upstream is {}×{}, cache is {}×{c}", up.rows(), up.cols(), cache.xhat.rows()));
    }
    let mut dgamma = Tensor::zeros([c]);
    let mut dx = Tensor::zeros([up.rows(), c]);
    let g_w = ln.gamma.data();
    for i in 0..up.rows() {
        let (dy, xh) = (up.row(i), cache.xhat.row(i));
        for (j, d) in dgamma.data_mut().iter_mut().enumerate() {
            *d += dy[j] * xh[j];
        }
        let g: Vec<f64> = dy.iter().zip(g_w).map(|(a, b)| a * b).collect();
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[i] / c as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (c as f64 * g[j] - sum_g - xh[j] * sum_gx);
        }
    }
    let dbeta = up.col_sum().reshape([c])?;
    Ok(NormGrads { dgamma, dbeta, dx })
}
