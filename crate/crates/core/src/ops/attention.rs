//! Multi-head self-attention with full and stochastic backward passes.
//!
//! Per sample and head: `Q = xW_Q`, `K = xW_K`, `V = xW_V`,
//! `M = QKᵀ/√d`, `S = softmax_rows(M)`, `A = SV`, and the block output is
//! `concat_heads(A)·W_O`.
//!
//! The stochastic backward first restricts the forward cache to what the drop
//! mode is allowed to read ([`restrict_cache`]) and then differentiates from
//! that restricted cache alone ([`mhsa_backward_kept`]).

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::ops::linear::mask_rows;
use crate::sampling::{HeadMask, IndexMask};
use crate::tensor::{gather_rows, matmul, matmul_nt, matmul_tn, scatter_rows_add, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

/// Which attention tensors lose their gradients at dropped positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Zero the rows of `dM` at dropped queries; values stay exact.
    QueryOnly,
    /// Zero dropped rows of `dQ`, `dK`, `dV` and the output gradient.
    Qkv,
    /// Zero every gradient of a subset of heads.
    Head,
}

impl FromStr for DropMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_only" => Ok(DropMode::QueryOnly),
            "qkv" => Ok(DropMode::Qkv),
            "head" => Ok(DropMode::Head),
            other => Err(config_err!("unknown attention drop mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaLayer {
    pub heads: usize,
    pub head_dim: usize,
    /// `C × (h·d)` each
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `(h·d) × C`
    pub wo: Tensor,
    pub drop_mode: DropMode,
}

impl MhsaLayer {
    pub fn new(heads: usize, head_dim: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, drop_mode: DropMode) -> Result<Self> {
        let hd = heads * head_dim;
        if hd == 0 {
            return Err(config_err!("attention needs at least one head of nonzero width"));
        }
        let c = wq.rows();
        for (name, w) in [("W_Q", &wq), ("W_K", &wk), ("W_V", &wv)] {
            if w.shape() != [c, hd] {
                return Err(dim_err!("{name} must be {c}×{hd}, got {:?}", w.shape()));
            }
        }
        if wo.shape() != [hd, c] {
            return Err(dim_err!("W_O must be {hd}×{c}, got {:?}", wo.shape()));
        }
        Ok(MhsaLayer { heads, head_dim, wq, wk, wv, wo, drop_mode })
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            for v in w.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Everything the full backward reads.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaCache {
    pub batch: usize,
    pub tokens: usize,
    /// `B·N × C`
    pub x: Tensor,
    /// `B·N × h·d` each
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `B·h·N × N`, one `N × N` block per (sample, head)
    pub m: Tensor,
    pub s: Tensor,
    /// `B·N × h·d`, heads concatenated
    pub a: Tensor,
    weights: u64,
}

impl MhsaCache {
    pub fn numel(&self) -> usize {
        [&self.x, &self.q, &self.k, &self.v, &self.m, &self.s, &self.a].iter().map(|t| t.numel()).sum()
    }

    /// Attention weights of one (sample, head) as an `N × N` matrix.
    pub fn attention(&self, b: usize, head: usize, heads: usize) -> Tensor {
        self.s.row_block((b * heads + head) * self.tokens, self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaGrads {
    pub dwq: Tensor,
    pub dwk: Tensor,
    pub dwv: Tensor,
    pub dwo: Tensor,
    pub dx: Tensor,
}

pub(crate) fn softmax_rows(m: &Tensor) -> Tensor {
    let mut s = m.clone();
    let c = s.cols();
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        debug_assert_eq!(row.len(), c);
    }
    s
}

/// Block of a `rows × h·d` tensor for sample `b` (each sample spans `n` rows) and `head`.
fn head_block(t: &Tensor, b: usize, n: usize, head: usize, d: usize) -> Tensor {
    t.row_block(b * n, n).col_block(head * d, d)
}

fn input_dims(layer: &MhsaLayer, x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != layer.channels() || s[1] == 0 {
        return Err(dim_err!("attention input must be B×N×{} with N ≥ 1, got {s:?}", layer.channels()));
    }
    Ok((s[0], s[1]))
}

pub fn mhsa_forward(layer: &MhsaLayer, x: &Tensor) -> Result<(Tensor, MhsaCache)> {
    let (batch, n) = input_dims(layer, x)?;
    let (h, d) = (layer.heads, layer.head_dim);
    let xm = x.as_matrix();
    let q = matmul(&xm, &layer.wq)?;
    let k = matmul(&xm, &layer.wk)?;
    let v = matmul(&xm, &layer.wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let blocks: Vec<(Tensor, Tensor, Tensor)> = (0..batch * h)
        .into_par_iter()
        .map(|bh| {
            let (b, head) = (bh / h, bh % h);
            let qb = head_block(&q, b, n, head, d);
            let kb = head_block(&k, b, n, head, d);
            let vb = head_block(&v, b, n, head, d);
            let m = matmul_nt(&qb, &kb)?.scale(scale);
            let s = softmax_rows(&m);
            let a = matmul(&s, &vb)?;
            Ok((m, s, a))
        })
        .collect::<Result<_>>()?;
    let mut a = Tensor::zeros([batch * n, h * d]);
    let mut ms = Vec::with_capacity(blocks.len());
    let mut ss = Vec::with_capacity(blocks.len());
    for (bh, (m, s, ab)) in blocks.into_iter().enumerate() {
        let (b, head) = (bh / h, bh % h);
        let mut rows = a.row_block(b * n, n);
        rows.set_col_block(head * d, &ab);
        for i in 0..n {
            a.row_mut(b * n + i).copy_from_slice(rows.row(i));
        }
        ms.push(m);
        ss.push(s);
    }
    let out = matmul(&a, &layer.wo)?.reshape([batch, n, layer.channels()])?;
    let cache = MhsaCache { batch, tokens: n, x: xm, q, k, v, m: Tensor::vstack(&ms)?, s: Tensor::vstack(&ss)?, a, weights: layer.digest() };
    Ok((out, cache))
}

fn check_cache(layer: &MhsaLayer, batch: usize, n: usize, x_cols: usize, weights: u64, upstream: &Tensor) -> Result<()> {
    if weights != layer.digest() {
        return Err(contract_err!("attention cache was produced with different weights"));
    }
    if x_cols != layer.channels() {
        return Err(contract_err!("attention cache has {x_cols} channels, layer has {}", layer.channels()));
    }
    if upstream.numel() != batch * n * layer.channels() {
        return Err(dim_err!("attention upstream has {} elements, expected {}×{}×{}", upstream.numel(), batch, n, layer.channels()));
    }
    Ok(())
}

/// Per-head gradients produced by the attention core.
struct HeadGrads {
    dq: Tensor,
    dk: Tensor,
    dv: Tensor,
}

fn assemble(parts: Vec<HeadGrads>, batch: usize, rows_per_sample: usize, h: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    let mut dq = Tensor::zeros([batch * rows_per_sample, h * d]);
    let mut dk = dq.clone();
    let mut dv = dq.clone();
    for (bh, g) in parts.into_iter().enumerate() {
        let (b, head) = (bh / h, bh % h);
        for i in 0..rows_per_sample {
            let r = b * rows_per_sample + i;
            dq.row_mut(r)[head * d..(head + 1) * d].copy_from_slice(g.dq.row(i));
            dk.row_mut(r)[head * d..(head + 1) * d].copy_from_slice(g.dk.row(i));
            dv.row_mut(r)[head * d..(head + 1) * d].copy_from_slice(g.dv.row(i));
        }
    }
    (dq, dk, dv)
}

/// `dM = S ⊙ (dS − rowsum(dS ⊙ S))`
fn softmax_backward(s: &Tensor, ds: &Tensor) -> Tensor {
    let mut dm = ds.clone();
    for i in 0..s.rows() {
        let dot: f64 = s.row(i).iter().zip(ds.row(i)).map(|(a, b)| a * b).sum();
        for (o, &sv) in dm.row_mut(i).iter_mut().zip(s.row(i)) {
            *o = sv * (*o - dot);
        }
    }
    dm
}

fn input_grads(layer: &MhsaLayer, x: &Tensor, dq: &Tensor, dk: &Tensor, dv: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let dwq = matmul_tn(x, dq)?;
    let dwk = matmul_tn(x, dk)?;
    let dwv = matmul_tn(x, dv)?;
    let mut dx = matmul_nt(dq, &layer.wq)?;
    dx.add_assign(&matmul_nt(dk, &layer.wk)?)?;
    dx.add_assign(&matmul_nt(dv, &layer.wv)?)?;
    Ok((dwq, dwk, dwv, dx))
}

/// Exact reverse-mode gradients of the attention block.
pub fn mhsa_backward_full(layer: &MhsaLayer, cache: &MhsaCache, upstream: &Tensor) -> Result<MhsaGrads> {
    mhsa_backward_heads(layer, cache, upstream, &[])
}

/// Full backward with the listed heads contributing nothing.
fn mhsa_backward_heads(layer: &MhsaLayer, cache: &MhsaCache, upstream: &Tensor, dropped: &[usize]) -> Result<MhsaGrads> {
    let (batch, n) = (cache.batch, cache.tokens);
    check_cache(layer, batch, n, cache.x.cols(), cache.weights, upstream)?;
    let (h, d) = (layer.heads, layer.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let up = upstream.reshape([batch * n, layer.channels()])?;
    let dwo = matmul_tn(&cache.a, &up)?;
    let da = matmul_nt(&up, &layer.wo)?;
    let parts: Vec<HeadGrads> = (0..batch * h)
        .into_par_iter()
        .map(|bh| {
            let (b, head) = (bh / h, bh % h);
            if dropped.contains(&head) {
                let z = Tensor::zeros([n, d]);
                return Ok(HeadGrads { dq: z.clone(), dk: z.clone(), dv: z });
            }
            let s = cache.s.row_block(bh * n, n);
            let dab = head_block(&da, b, n, head, d);
            let ds = matmul_nt(&dab, &head_block(&cache.v, b, n, head, d))?;
            let dm = softmax_backward(&s, &ds);
            Ok(HeadGrads {
                dq: matmul(&dm, &head_block(&cache.k, b, n, head, d))?.scale(scale),
                dk: matmul_tn(&dm, &head_block(&cache.q, b, n, head, d))?.scale(scale),
                dv: matmul_tn(&s, &dab)?,
            })
        })
        .collect::<Result<_>>()?;
    let (dq, dk, dv) = assemble(parts, batch, n, h, d);
    let (dwq, dwk, dwv, dx) = input_grads(layer, &cache.x, &dq, &dk, &dv)?;
    Ok(MhsaGrads { dwq, dwk, dwv, dwo, dx: dx.reshape([batch, n, layer.channels()])? })
}

/// The part of a forward cache a drop mode may read.
#[derive(Debug, Clone, PartialEq)]
pub enum MhsaKept {
    /// Full `x`, `A`, `K`, `V`, `S`; kept rows of `Q` and of `M`.
    QueryOnly {
        batch: usize,
        tokens: usize,
        x: Tensor,
        a: Tensor,
        q_keep: Tensor,
        k: Tensor,
        v: Tensor,
        m_keep_rows: Tensor,
        s: Tensor,
        weights: u64,
    },
    /// Kept rows of `x`, `A`, `Q`, `K`, `V`; kept×kept blocks of `M`, `S`.
    Qkv {
        batch: usize,
        tokens: usize,
        x_keep: Tensor,
        a_keep: Tensor,
        q_keep: Tensor,
        k_keep: Tensor,
        v_keep: Tensor,
        m_keep: Tensor,
        s_keep: Tensor,
        weights: u64,
    },
    /// Head dropping keeps the full cache.
    Head(MhsaCache),
}

impl MhsaKept {
    pub fn numel(&self) -> usize {
        match self {
            MhsaKept::QueryOnly { x, a, q_keep, k, v, m_keep_rows, s, .. } => [x, a, q_keep, k, v, m_keep_rows, s].iter().map(|t| t.numel()).sum(),
            MhsaKept::Qkv { x_keep, a_keep, q_keep, k_keep, v_keep, m_keep, s_keep, .. } => {
                [x_keep, a_keep, q_keep, k_keep, v_keep, m_keep, s_keep].iter().map(|t| t.numel()).sum()
            }
            MhsaKept::Head(c) => c.numel(),
        }
    }
}

/// Rows of the stacked `B·h·N × N` attention maps for kept queries, optionally
/// restricted to kept key columns.
fn gather_attention(t: &Tensor, batch: usize, h: usize, n: usize, keep: &[usize], keep_cols: bool) -> Result<Tensor> {
    let mut blocks = Vec::with_capacity(batch * h);
    for bh in 0..batch * h {
        let rows: Vec<usize> = keep.iter().map(|&i| bh * n + i).collect();
        let sel = gather_rows(t, &rows)?;
        blocks.push(if keep_cols { gather_rows(&sel.transpose(), keep)?.transpose() } else { sel });
    }
    Tensor::vstack(&blocks)
}

/// Copies out exactly the cache entries `mode` reads.
pub fn restrict_cache(cache: &MhsaCache, heads: usize, mask: &IndexMask, mode: DropMode) -> Result<MhsaKept> {
    let (batch, n) = (cache.batch, cache.tokens);
    if mask.total() != n {
        return Err(dim_err!("token mask covers {} positions, attention has {n} tokens", mask.total()));
    }
    let (keep_rows, _) = mask.batch_rows(batch);
    Ok(match mode {
        DropMode::QueryOnly => MhsaKept::QueryOnly {
            batch,
            tokens: n,
            x: cache.x.clone(),
            a: cache.a.clone(),
            q_keep: gather_rows(&cache.q, &keep_rows)?,
            k: cache.k.clone(),
            v: cache.v.clone(),
            m_keep_rows: gather_attention(&cache.m, batch, heads, n, mask.keep(), false)?,
            s: cache.s.clone(),
            weights: cache.weights,
        },
        DropMode::Qkv => MhsaKept::Qkv {
            batch,
            tokens: n,
            x_keep: gather_rows(&cache.x, &keep_rows)?,
            a_keep: gather_rows(&cache.a, &keep_rows)?,
            q_keep: gather_rows(&cache.q, &keep_rows)?,
            k_keep: gather_rows(&cache.k, &keep_rows)?,
            v_keep: gather_rows(&cache.v, &keep_rows)?,
            m_keep: gather_attention(&cache.m, batch, heads, n, mask.keep(), true)?,
            s_keep: gather_attention(&cache.s, batch, heads, n, mask.keep(), true)?,
            weights: cache.weights,
        },
        DropMode::Head => MhsaKept::Head(cache.clone()),
    })
}

/// Stochastic backward computed from a restricted cache only.
///
/// `upstream` is the full `B×N×C` output gradient; under `Qkv` only its kept
/// rows are read. `heads` selects the dropped heads for `Head` mode.
pub fn mhsa_backward_kept(layer: &MhsaLayer, kept: &MhsaKept, upstream: &Tensor, mask: &IndexMask, heads: Option<&HeadMask>) -> Result<MhsaGrads> {
    let (h, d, c) = (layer.heads, layer.head_dim, layer.channels());
    let scale = 1.0 / (d as f64).sqrt();
    match kept {
        MhsaKept::Head(cache) => {
            let hm = heads.ok_or_else(|| config_err!("head drop mode needs a head mask"))?;
            if hm.heads != h {
                return Err(dim_err!("head mask covers {} heads, layer has {h}", hm.heads));
            }
            mhsa_backward_heads(layer, cache, upstream, &hm.dropped)
        }
        MhsaKept::QueryOnly { batch, tokens, x, a, q_keep, k, v, s, weights, .. } => {
            let (batch, n) = (*batch, *tokens);
            check_cache(layer, batch, n, x.cols(), *weights, upstream)?;
            let nk = mask.keep().len();
            let up = upstream.reshape([batch * n, c])?;
            let dwo = matmul_tn(a, &up)?;
            let da = matmul_nt(&up, &layer.wo)?;
            let parts: Vec<HeadGrads> = (0..batch * h)
                .into_par_iter()
                .map(|bh| {
                    let (b, head) = (bh / h, bh % h);
                    let s_full = s.row_block(bh * n, n);
                    let dab = head_block(&da, b, n, head, d);
                    let vb = head_block(v, b, n, head, d);
                    let s_keep = gather_rows(&s_full, mask.keep())?;
                    let ds_keep = matmul_nt(&gather_rows(&dab, mask.keep())?, &vb)?;
                    let dm_keep = softmax_backward(&s_keep, &ds_keep);
                    let qk = q_keep.row_block(b * nk, nk).col_block(head * d, d);
                    let dq_keep = matmul(&dm_keep, &head_block(k, b, n, head, d))?.scale(scale);
                    Ok(HeadGrads {
                        dq: scatter_rows_add(&Tensor::zeros([n, d]), mask.keep(), &dq_keep)?,
                        dk: matmul_tn(&dm_keep, &qk)?.scale(scale),
                        dv: matmul_tn(&s_full, &dab)?,
                    })
                })
                .collect::<Result<_>>()?;
            let (dq, dk, dv) = assemble(parts, batch, n, h, d);
            let (dwq, dwk, dwv, dx) = input_grads(layer, x, &dq, &dk, &dv)?;
            Ok(MhsaGrads { dwq, dwk, dwv, dwo, dx: dx.reshape([batch, n, c])? })
        }
        MhsaKept::Qkv { batch, tokens, x_keep, a_keep, q_keep, k_keep, v_keep, s_keep, weights, .. } => {
            let (batch, n) = (*batch, *tokens);
            check_cache(layer, batch, n, x_keep.cols(), *weights, upstream)?;
            let nk = mask.keep().len();
            let up = upstream.reshape([batch * n, c])?;
            let (keep_rows, _) = mask_rows(mask, batch * n)?;
            let up_keep = gather_rows(&up, &keep_rows)?;
            let dwo = matmul_tn(a_keep, &up_keep)?;
            let da_keep = matmul_nt(&up_keep, &layer.wo)?;
            let parts: Vec<HeadGrads> = (0..batch * h)
                .into_par_iter()
                .map(|bh| {
                    let (b, head) = (bh / h, bh % h);
                    let blk = |t: &Tensor| head_block(t, b, nk, head, d);
                    let sk = s_keep.row_block(bh * nk, nk);
                    let dab = blk(&da_keep);
                    let ab = blk(a_keep);
                    let ds = matmul_nt(&dab, &blk(v_keep))?;
                    // Σ_l dS_il S_il over all keys equals dA_i · A_i
                    let mut dm = ds;
                    for i in 0..nk {
                        let dot: f64 = dab.row(i).iter().zip(ab.row(i)).map(|(x, y)| x * y).sum();
                        for (o, &sv) in dm.row_mut(i).iter_mut().zip(sk.row(i)) {
                            *o = sv * (*o - dot);
                        }
                    }
                    Ok(HeadGrads {
                        dq: matmul(&dm, &blk(k_keep))?.scale(scale),
                        dk: matmul_tn(&dm, &blk(q_keep))?.scale(scale),
                        dv: matmul_tn(&sk, &dab)?,
                    })
                })
                .collect::<Result<_>>()?;
            let (dq, dk, dv) = assemble(parts, batch, nk, h, d);
            let (dwq, dwk, dwv, dx_keep) = input_grads(layer, x_keep, &dq, &dk, &dv)?;
            let dx = scatter_rows_add(&Tensor::zeros([batch * n, c]), &keep_rows, &dx_keep)?;
            Ok(MhsaGrads { dwq, dwk, dwv, dwo, dx: dx.reshape([batch, n, c])? })
        }
    }
}

/// Stochastic backward from a full forward cache. Reads only the entries the
/// mode's restricted cache holds.
pub fn mhsa_backward_sbp(
    layer: &MhsaLayer,
    cache: &MhsaCache,
    upstream: &Tensor,
    mask: &IndexMask,
    mode: DropMode,
    heads: Option<&HeadMask>,
) -> Result<MhsaGrads> {
    let nothing_dropped = match mode {
        DropMode::Head => heads.is_some_and(|hm| hm.dropped.is_empty()),
        _ => mask.is_full(),
    };
    if nothing_dropped && mask.total() == cache.tokens {
        return mhsa_backward_full(layer, cache, upstream);
    }
    let kept = restrict_cache(cache, layer.heads, mask, mode)?;
    mhsa_backward_kept(layer, &kept, upstream, mask, heads)
}
