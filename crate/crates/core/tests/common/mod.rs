//! Reference implementations for the integration tests.
//!
//! Everything here is written with plain index loops over `Vec<f64>` and
//! defines stochastic backprop the slow way: run the full backward pass after
//! zeroing the upstream gradient at dropped positions.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sbp_core::engine::{Batch, Model, Target};
use sbp_core::network::{head_dim, LayerSpec};
use sbp_core::ops::DropMode;
use sbp_core::sampling::MaskPlan;
use sbp_core::tensor::Tensor;
use std::collections::BTreeMap;

pub const LN_EPS: f64 = 1e-6;

pub fn randn(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, scale).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

/// Largest `|a − b| / max(1, |b|)`.
pub fn max_rel_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = n(a).max(n(b));
    if m == 0.0 {
        0.0
    } else {
        n(&d) / m
    }
}

// ---------------------------------------------------------------------------
// dense algebra on row-major slices

/// `a (r×k) · b (k×c)`
pub fn mm(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut o = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * c + j];
            }
            o[i * c + j] = s;
        }
    }
    o
}

/// `aᵀ (k×r) · b (r×c)` for `a` stored `r×k`
pub fn mm_tn(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
    let mut o = vec![0.0; k * c];
    for i in 0..k {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..r {
                s += a[t * k + i] * b[t * c + j];
            }
            o[i * c + j] = s;
        }
    }
    o
}

/// `a (r×c) · bᵀ (c×k)` for `b` stored `k×c`
pub fn mm_nt(a: &[f64], r: usize, c: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut o = vec![0.0; r * k];
    for i in 0..r {
        for j in 0..k {
            let mut s = 0.0;
            for t in 0..c {
                s += a[i * c + t] * b[j * c + t];
            }
            o[i * k + j] = s;
        }
    }
    o
}

pub fn col_sum(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    (0..c).map(|j| (0..r).map(|i| a[i * c + j]).sum()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Zeroes rows whose token (row index mod `tokens`) is not kept.
pub fn zero_dropped_rows(a: &mut [f64], c: usize, keep: &[bool]) {
    let tokens = keep.len();
    for (r, row) in a.chunks_mut(c).enumerate() {
        if !keep[r % tokens] {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// point-wise operators

pub struct LinearGrads {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dx: Vec<f64>,
}

pub fn linear_fwd(x: &[f64], r: usize, cin: usize, w: &[f64], b: Option<&[f64]>, cout: usize) -> Vec<f64> {
    let mut y = mm(x, r, cin, w, cout);
    if let Some(b) = b {
        for row in y.chunks_mut(cout) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    y
}

pub fn linear_bwd(x: &[f64], r: usize, cin: usize, w: &[f64], cout: usize, up: &[f64]) -> LinearGrads {
    LinearGrads { dw: mm_tn(x, r, cin, up, cout), db: col_sum(up, r, cout), dx: mm_nt(up, r, cout, w, cin) }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct LnOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv: Vec<f64>,
}

pub fn ln_fwd(x: &[f64], c: usize, g: &[f64], b: &[f64]) -> LnOut {
    let r = x.len() / c;
    let (mut y, mut xhat, mut inv) = (vec![0.0; x.len()], vec![0.0; x.len()], vec![0.0; r]);
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        inv[i] = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            xhat[i * c + j] = (row[j] - mu) * inv[i];
            y[i * c + j] = xhat[i * c + j] * g[j] + b[j];
        }
    }
    LnOut { y, xhat, inv }
}

/// `(dgamma, dbeta, dx)`
pub fn ln_bwd(o: &LnOut, c: usize, g: &[f64], up: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = up.len() / c;
    let (mut dg, mut db, mut dx) = (vec![0.0; c], vec![0.0; c], vec![0.0; up.len()]);
    for i in 0..r {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..c {
            let u = up[i * c + j];
            dg[j] += u * o.xhat[i * c + j];
            db[j] += u;
            let dxh = u * g[j];
            m1 += dxh;
            m2 += dxh * o.xhat[i * c + j];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for j in 0..c {
            let dxh = up[i * c + j] * g[j];
            dx[i * c + j] = o.inv[i] * (dxh - m1 - o.xhat[i * c + j] * m2);
        }
    }
    (dg, db, dx)
}

// ---------------------------------------------------------------------------
// convolution, `B×H×W×C` input and `k×k×Cin×Cout` weights

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.p - self.k) / self.s + 1, (self.w + 2 * self.p - self.k) / self.s + 1)
    }

    /// Input index read by output `(oy, ox)` at tap `(ky, kx)`, if inside.
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.s + ky) as isize - self.p as isize;
        let ix = (ox * self.s + kx) as isize - self.p as isize;
        (iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w).then_some((iy as usize, ix as usize))
    }
}

pub fn conv_fwd(d: ConvDims, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = d.out_hw();
    let mut y = vec![0.0; d.b * oh * ow * d.cout];
    for b in 0..d.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..d.cout {
                    let mut s = bias[co];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            if let Some((iy, ix)) = d.tap(oy, ox, ky, kx) {
                                for ci in 0..d.cin {
                                    s += x[((b * d.h + iy) * d.w + ix) * d.cin + ci] * w[((ky * d.k + kx) * d.cin + ci) * d.cout + co];
                                }
                            }
                        }
                    }
                    y[((b * oh + oy) * ow + ox) * d.cout + co] = s;
                }
            }
        }
    }
    y
}

/// `(dw, db, dx)`
pub fn conv_bwd(d: ConvDims, x: &[f64], w: &[f64], up: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = d.out_hw();
    let (mut dw, mut db, mut dx) = (vec![0.0; w.len()], vec![0.0; d.cout], vec![0.0; x.len()]);
    for b in 0..d.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..d.cout {
                    let u = up[((b * oh + oy) * ow + ox) * d.cout + co];
                    db[co] += u;
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            if let Some((iy, ix)) = d.tap(oy, ox, ky, kx) {
                                for ci in 0..d.cin {
                                    let xi = ((b * d.h + iy) * d.w + ix) * d.cin + ci;
                                    let wi = ((ky * d.k + kx) * d.cin + ci) * d.cout + co;
                                    dw[wi] += u * x[xi];
                                    dx[xi] += u * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

// ---------------------------------------------------------------------------
// multi-head self-attention

pub struct MhsaParams<'a> {
    pub heads: usize,
    pub d: usize,
    pub c: usize,
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

/// How the reference zeroes gradients: token keep flags and dropped heads.
pub struct MhsaDrop<'a> {
    pub mode: DropMode,
    pub keep: &'a [bool],
    pub dropped_heads: &'a [usize],
}

pub struct MhsaFwd {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// per (sample, head): `N×N`
    pub s: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub out: Vec<f64>,
}

pub struct MhsaGrads {
    pub dwq: Vec<f64>,
    pub dwk: Vec<f64>,
    pub dwv: Vec<f64>,
    pub dwo: Vec<f64>,
    pub dx: Vec<f64>,
}

pub fn mhsa_fwd(p: &MhsaParams, x: &[f64], batch: usize, n: usize) -> MhsaFwd {
    let (h, d, c) = (p.heads, p.d, p.c);
    let hd = h * d;
    let rows = batch * n;
    let q = mm(x, rows, c, p.wq, hd);
    let k = mm(x, rows, c, p.wk, hd);
    let v = mm(x, rows, c, p.wv, hd);
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = vec![0.0; rows * hd];
    let mut s_all = Vec::new();
    for b in 0..batch {
        for head in 0..h {
            let at = |t: &[f64], i: usize, e: usize| t[(b * n + i) * hd + head * d + e];
            let mut s = vec![0.0; n * n];
            for i in 0..n {
                let logits: Vec<f64> = (0..n).map(|l| (0..d).map(|e| at(&q, i, e) * at(&k, l, e)).sum::<f64>() * scale).collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|m| (m - mx).exp()).sum();
                for l in 0..n {
                    s[i * n + l] = (logits[l] - mx).exp() / z;
                }
                for e in 0..d {
                    a[(b * n + i) * hd + head * d + e] = (0..n).map(|l| s[i * n + l] * at(&v, l, e)).sum();
                }
            }
            s_all.push(s);
        }
    }
    let out = mm(&a, rows, hd, p.wo, c);
    MhsaFwd { q, k, v, s: s_all, a, out }
}

/// Full backward after zeroing whatever `drop` says is dropped.
pub fn mhsa_bwd(p: &MhsaParams, x: &[f64], f: &MhsaFwd, batch: usize, n: usize, up: &[f64], drop: Option<&MhsaDrop>) -> MhsaGrads {
    let (h, d, c) = (p.heads, p.d, p.c);
    let hd = h * d;
    let rows = batch * n;
    let scale = 1.0 / (d as f64).sqrt();
    let kept = |i: usize| drop.is_none_or(|dr| dr.keep[i]);
    let mode = drop.map(|dr| dr.mode);
    let mut up = up.to_vec();
    if mode == Some(DropMode::Qkv) {
        zero_dropped_rows(&mut up, c, drop.unwrap().keep);
    }
    let dwo = mm_tn(&f.a, rows, hd, &up, c);
    let mut da = mm_nt(&up, rows, c, p.wo, hd);
    if let Some(dr) = drop.filter(|dr| dr.mode == DropMode::Head) {
        for row in da.chunks_mut(hd) {
            for &head in dr.dropped_heads {
                row[head * d..(head + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let (mut dq, mut dk, mut dv) = (vec![0.0; rows * hd], vec![0.0; rows * hd], vec![0.0; rows * hd]);
    for b in 0..batch {
        for head in 0..h {
            let s = &f.s[b * h + head];
            let idx = |i: usize, e: usize| (b * n + i) * hd + head * d + e;
            let mut dm = vec![0.0; n * n];
            for i in 0..n {
                let ds: Vec<f64> = (0..n).map(|l| (0..d).map(|e| da[idx(i, e)] * f.v[idx(l, e)]).sum()).collect();
                let dot: f64 = (0..n).map(|l| ds[l] * s[i * n + l]).sum();
                for l in 0..n {
                    dm[i * n + l] = s[i * n + l] * (ds[l] - dot);
                }
            }
            match mode {
                Some(DropMode::QueryOnly) => {
                    for i in (0..n).filter(|&i| !kept(i)) {
                        dm[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                Some(DropMode::Qkv) => {
                    for i in 0..n {
                        for l in 0..n {
                            if !kept(i) || !kept(l) {
                                dm[i * n + l] = 0.0;
                            }
                        }
                    }
                }
                _ => {}
            }
            for i in 0..n {
                for e in 0..d {
                    dq[idx(i, e)] = scale * (0..n).map(|l| dm[i * n + l] * f.k[idx(l, e)]).sum::<f64>();
                    dk[idx(i, e)] = scale * (0..n).map(|r| dm[r * n + i] * f.q[idx(r, e)]).sum::<f64>();
                    let keep_v = mode != Some(DropMode::Qkv) || kept(i);
                    dv[idx(i, e)] = if keep_v { (0..n).map(|r| s[r * n + i] * da[idx(r, e)]).sum() } else { 0.0 };
                }
            }
        }
    }
    let dx = add(&add(&mm_nt(&dq, rows, hd, p.wq, c), &mm_nt(&dk, rows, hd, p.wk, c)), &mm_nt(&dv, rows, hd, p.wv, c));
    MhsaGrads { dwq: mm_tn(x, rows, c, &dq, hd), dwk: mm_tn(x, rows, c, &dk, hd), dwv: mm_tn(x, rows, c, &dv, hd), dwo, dx }
}

// ---------------------------------------------------------------------------
// whole networks

enum Saved {
    Dense { x: Vec<f64>, pre: Vec<f64> },
    Norm { o: LnOut },
    Conv { x: Vec<f64>, pre: Vec<f64>, dims: ConvDims },
    Block(Box<BlockSaved>),
    Pool { tokens: usize },
}

struct BlockSaved {
    ln1: LnOut,
    att: MhsaFwd,
    y: Vec<f64>,
    ln2: LnOut,
    pre: Vec<f64>,
    g: Vec<f64>,
}

fn param<'a>(model: &'a Model, id: usize, name: &str) -> &'a [f64] {
    model.params[&format!("{id:02}.{name}")].data()
}

pub struct OracleResult {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: BTreeMap<String, Vec<f64>>,
    /// Gradient with respect to each layer's input.
    pub input_grads: BTreeMap<usize, Vec<f64>>,
}

fn loss_grad(logits: &[f64], k: usize, target: &Target) -> (f64, Vec<f64>) {
    let Target::Labels(labels) = target else { panic!("oracle handles label targets") };
    let b = labels.len();
    let mut g = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += mx + z.ln() - row[l];
        for j in 0..k {
            g[i * k + j] = ((row[j] - mx).exp() / z - if j == l { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, g)
}

/// Loss, gradients and per-layer input gradients of `model` on `batch`, with
/// each SBP layer's dropped positions zeroed in the gradient reaching it
/// (`plan = None` means exact backprop everywhere).
pub fn oracle(model: &Model, plan: Option<&MaskPlan>, batch: &Batch) -> OracleResult {
    let spec = &model.spec;
    let io = spec.trace().unwrap();
    let bsz = batch.x.shape()[0];
    let mut h = batch.x.data().to_vec();
    let mut saved = Vec::new();
    for (id, (layer, lio)) in spec.layers.iter().zip(&io).enumerate() {
        let rows = bsz * lio.in_grid.numel();
        match *layer {
            LayerSpec::Dense { c_in, c_out, bias, gelu: act, .. } => {
                let b = bias.then(|| param(model, id, "b"));
                let pre = linear_fwd(&h, rows, c_in, param(model, id, "w"), b, c_out);
                let out = if act { pre.iter().map(|&v| gelu(v)).collect() } else { pre.clone() };
                saved.push(Saved::Dense { x: std::mem::replace(&mut h, out), pre });
            }
            LayerSpec::LayerNorm { dim, .. } => {
                let o = ln_fwd(&h, dim, param(model, id, "gamma"), param(model, id, "beta"));
                h = o.y.clone();
                saved.push(Saved::Norm { o });
            }
            LayerSpec::Conv2d { kernel, stride, padding, c_in, c_out, gelu: act, .. } => {
                let g = lio.in_grid.dims();
                let dims = ConvDims { b: bsz, h: g[0], w: g[1], cin: c_in, cout: c_out, k: kernel, s: stride, p: padding };
                let pre = conv_fwd(dims, &h, param(model, id, "w"), param(model, id, "b"));
                let out = if act { pre.iter().map(|&v| gelu(v)).collect() } else { pre.clone() };
                saved.push(Saved::Conv { x: std::mem::replace(&mut h, out), pre, dims });
            }
            LayerSpec::Block { dim, heads, mlp_hidden, .. } => {
                let n = lio.in_grid.numel();
                let ln1 = ln_fwd(&h, dim, param(model, id, "ln1.gamma"), param(model, id, "ln1.beta"));
                let p = mhsa_params(model, id, dim, heads);
                let att = mhsa_fwd(&p, &ln1.y, bsz, n);
                let y = add(&h, &att.out);
                let ln2 = ln_fwd(&y, dim, param(model, id, "ln2.gamma"), param(model, id, "ln2.beta"));
                let pre = linear_fwd(&ln2.y, rows, dim, param(model, id, "fc1.w"), Some(param(model, id, "fc1.b")), mlp_hidden);
                let g: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
                let m = linear_fwd(&g, rows, mlp_hidden, param(model, id, "fc2.w"), Some(param(model, id, "fc2.b")), dim);
                h = add(&y, &m);
                saved.push(Saved::Block(Box::new(BlockSaved { ln1, att, y, ln2, pre, g })));
            }
            LayerSpec::MeanPool => {
                let (tokens, c) = (lio.in_grid.numel(), lio.in_c);
                let mut out = vec![0.0; bsz * c];
                for b in 0..bsz {
                    for t in 0..tokens {
                        for j in 0..c {
                            out[b * c + j] += h[(b * tokens + t) * c + j];
                        }
                    }
                }
                h = out.iter().map(|v| v / tokens as f64).collect();
                saved.push(Saved::Pool { tokens });
            }
        }
    }
    let k = spec.output_channels().unwrap();
    let (loss, mut up) = loss_grad(&h, k, &batch.target);
    let logits = h;
    let mut grads = BTreeMap::new();
    let mut input_grads = BTreeMap::new();
    for (id, ((layer, lio), s)) in spec.layers.iter().zip(&io).zip(&saved).enumerate().rev() {
        let rows = bsz * lio.in_grid.numel();
        let entry = if layer.sbp() { plan.and_then(|p| p.entry(id)) } else { None };
        let keep = entry.map(|e| e.mask.keep_flags());
        let mut put = |name: &str, v: Vec<f64>| {
            grads.insert(format!("{id:02}.{name}"), v);
        };
        let dx = match (layer, s) {
            (&LayerSpec::Dense { c_in, c_out, bias, gelu: act, .. }, Saved::Dense { x, pre }) => {
                if let Some(kf) = &keep {
                    zero_dropped_rows(&mut up, c_out, kf);
                }
                let dpre: Vec<f64> = if act { up.iter().zip(pre).map(|(u, p)| u * gelu_prime(*p)).collect() } else { up.clone() };
                let g = linear_bwd(x, rows, c_in, param(model, id, "w"), c_out, &dpre);
                put("w", g.dw);
                if bias {
                    put("b", g.db);
                }
                g.dx
            }
            (&LayerSpec::LayerNorm { dim, .. }, Saved::Norm { o }) => {
                if let Some(kf) = &keep {
                    zero_dropped_rows(&mut up, dim, kf);
                }
                let (dg, db, dx) = ln_bwd(o, dim, param(model, id, "gamma"), &up);
                put("gamma", dg);
                put("beta", db);
                dx
            }
            (&LayerSpec::Conv2d { c_out, gelu: act, .. }, Saved::Conv { x, pre, dims }) => {
                if let Some(kf) = &keep {
                    zero_dropped_rows(&mut up, c_out, kf);
                }
                let dpre: Vec<f64> = if act { up.iter().zip(pre).map(|(u, p)| u * gelu_prime(*p)).collect() } else { up.clone() };
                let (dw, db, dx) = conv_bwd(*dims, x, param(model, id, "w"), &dpre);
                put("w", dw);
                put("b", db);
                dx
            }
            (&LayerSpec::Block { dim, heads, mlp_hidden, drop_mode, .. }, Saved::Block(bs)) => {
                let n = lio.in_grid.numel();
                let mut dm = up.clone();
                if let Some(kf) = &keep {
                    zero_dropped_rows(&mut dm, dim, kf);
                }
                let g2 = linear_bwd(&bs.g, rows, mlp_hidden, param(model, id, "fc2.w"), dim, &dm);
                let dpre: Vec<f64> = g2.dx.iter().zip(&bs.pre).map(|(u, p)| u * gelu_prime(*p)).collect();
                let g1 = linear_bwd(&bs.ln2.y, rows, dim, param(model, id, "fc1.w"), mlp_hidden, &dpre);
                let (dg2, db2, dy_ln) = ln_bwd(&bs.ln2, dim, param(model, id, "ln2.gamma"), &g1.dx);
                let dy = add(&up, &dy_ln);
                let p = mhsa_params(model, id, dim, heads);
                let dropped: Vec<usize> = entry.and_then(|e| e.heads.as_ref()).map_or(vec![], |hm| hm.dropped.clone());
                let drop = keep.as_ref().map(|kf| MhsaDrop { mode: drop_mode, keep: kf, dropped_heads: &dropped });
                let ga = mhsa_bwd(&p, &bs.ln1.y, &bs.att, bsz, n, &dy, drop.as_ref());
                let (dg1, db1, dx_ln) = ln_bwd(&bs.ln1, dim, param(model, id, "ln1.gamma"), &ga.dx);
                put("fc2.w", g2.dw);
                put("fc2.b", g2.db);
                put("fc1.w", g1.dw);
                put("fc1.b", g1.db);
                put("ln2.gamma", dg2);
                put("ln2.beta", db2);
                put("attn.wq", ga.dwq);
                put("attn.wk", ga.dwk);
                put("attn.wv", ga.dwv);
                put("attn.wo", ga.dwo);
                put("ln1.gamma", dg1);
                put("ln1.beta", db1);
                add(&dy, &dx_ln)
            }
            (LayerSpec::MeanPool, Saved::Pool { tokens }) => {
                let c = lio.in_c;
                let mut dx = vec![0.0; bsz * tokens * c];
                for b in 0..bsz {
                    for t in 0..*tokens {
                        for j in 0..c {
                            dx[(b * tokens + t) * c + j] = up[b * c + j] / *tokens as f64;
                        }
                    }
                }
                dx
            }
            _ => unreachable!("saved state matches layer kind"),
        };
        input_grads.insert(id, dx.clone());
        up = dx;
    }
    OracleResult { loss, logits, grads, input_grads }
}

fn mhsa_params(model: &Model, id: usize, dim: usize, heads: usize) -> MhsaParams<'_> {
    MhsaParams {
        heads,
        d: head_dim(dim, heads),
        c: dim,
        wq: param(model, id, "attn.wq"),
        wk: param(model, id, "attn.wk"),
        wv: param(model, id, "attn.wv"),
        wo: param(model, id, "attn.wo"),
    }
}

/// Central finite-difference gradient of the oracle loss for every parameter.
pub fn fd_grads(model: &Model, batch: &Batch, h: f64) -> BTreeMap<String, Vec<f64>> {
    let mut m = model.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let len = m.params[&name].numel();
        let g: Vec<f64> = (0..len)
            .map(|i| {
                let orig = m.params[&name].data()[i];
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let lp = oracle(&m, None, batch).loss;
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let lm = oracle(&m, None, batch).loss;
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        out.insert(name, g);
    }
    out
}

pub fn label_batch(x: Tensor, labels: Vec<usize>) -> Batch {
    Batch { x, target: Target::Labels(labels) }
}

// ---------------------------------------------------------------------------
// random (operator, shape, mask, mode) instances

pub mod instances {
    use super::*;
    use rand::RngExt;
    use sbp_core::engine::{backward_with, forward};
    use sbp_core::network::NetworkSpec;
    use sbp_core::ops::{conv2d_backward_sbp, linear_backward_sbp, mhsa_backward_sbp, mhsa_forward, Conv2dLayer, LinearLayer, LossKind, MhsaLayer};
    use sbp_core::sampling::{HeadMask, IndexMask};
    use sbp_core::tensor::Shape;

    pub fn random_mask(rng: &mut ChaCha8Rng, dims: &[usize]) -> IndexMask {
        let shape = Shape::new(dims.to_vec()).unwrap();
        let p = rng.random::<f64>();
        let keep: Vec<usize> = (0..shape.numel()).filter(|_| rng.random_bool(p)).collect();
        IndexMask::from_keep(shape, keep).unwrap()
    }

    fn zeroed(up: &Tensor, c: usize, mask: &IndexMask) -> Vec<f64> {
        let mut v = up.data().to_vec();
        zero_dropped_rows(&mut v, c, &mask.keep_flags());
        v
    }

    /// Largest deviation of the library's SBP backward from the reference.
    pub fn linear(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, n, cin, cout) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..7), rng.random_range(1..7));
        let mask = random_mask(&mut rng, &[n]);
        let w = randn(&[cin, cout], 0.5, seed ^ 1);
        let bias = randn(&[cout], 0.5, seed ^ 2);
        let x = randn(&[b * n, cin], 1.0, seed ^ 3);
        let up = randn(&[b * n, cout], 1.0, seed ^ 4);
        let layer = LinearLayer::new(w.clone(), Some(bias)).unwrap();
        let got = linear_backward_sbp(&layer, &x, &up, &mask).unwrap();
        let want = linear_bwd(x.data(), b * n, cin, w.data(), cout, &zeroed(&up, cout, &mask));
        max_rel_dev(got.dw.data(), &want.dw).max(max_rel_dev(got.db.unwrap().data(), &want.db)).max(max_rel_dev(got.dx.data(), &want.dx))
    }

    fn conv_dims(rng: &mut ChaCha8Rng) -> ConvDims {
        let k = rng.random_range(1..4);
        let s = rng.random_range(1..4);
        let (oh, ow) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut p = rng.random_range(0..k);
        let size = |o: usize, p: usize| ((o - 1) * s + k) as isize - 2 * p as isize;
        if size(oh, p) < 1 || size(ow, p) < 1 {
            p = 0;
        }
        ConvDims {
            b: rng.random_range(1..3),
            h: size(oh, p) as usize,
            w: size(ow, p) as usize,
            cin: rng.random_range(1..4),
            cout: rng.random_range(1..4),
            k,
            s,
            p,
        }
    }

    /// Operator-level and engine-level (cached receptive fields) conv SBP.
    pub fn conv(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = conv_dims(&mut rng);
        let (oh, ow) = d.out_hw();
        let mask = random_mask(&mut rng, &[oh, ow]);
        let w = randn(&[d.k, d.k, d.cin, d.cout], 0.5, seed ^ 1);
        let bias = randn(&[d.cout], 0.5, seed ^ 2);
        let x = randn(&[d.b, d.h, d.w, d.cin], 1.0, seed ^ 3);
        let up = randn(&[d.b, oh, ow, d.cout], 1.0, seed ^ 4);
        let layer = Conv2dLayer::new(w.clone(), Some(bias), d.s, d.p).unwrap();
        let got = conv2d_backward_sbp(&layer, &x, &up, &mask).unwrap();
        let (dw, db, dx) = conv_bwd(d, x.data(), w.data(), &zeroed(&up, d.cout, &mask));
        let op_dev = max_rel_dev(got.dw.data(), &dw).max(max_rel_dev(got.db.unwrap().data(), &db)).max(max_rel_dev(got.dx.data(), &dx));

        let spec = NetworkSpec {
            input_grid: Shape::new(vec![d.h, d.w]).unwrap(),
            in_channels: d.cin,
            layers: vec![
                LayerSpec::Conv2d { kernel: d.k, stride: d.s, padding: d.p, c_in: d.cin, c_out: d.cout, gelu: rng.random_bool(0.5), sbp: true },
                LayerSpec::MeanPool,
                LayerSpec::Dense { c_in: d.cout, c_out: 2, bias: true, gelu: false, sbp: false },
            ],
            loss: LossKind::SoftmaxXent,
        };
        op_dev.max(network(spec, vec![mask], d.b, seed))
    }

    /// Engine gradients (parameters and per-layer input gradients) against the
    /// reference network under explicit masks.
    pub fn network(spec: NetworkSpec, masks: Vec<IndexMask>, batch: usize, seed: u64) -> f64 {
        let model = Model::init(spec, seed).unwrap();
        let plan = MaskPlan::from_masks(&model.spec, masks).unwrap();
        network_with_plan(&model, &plan, batch, seed)
    }

    pub fn network_with_plan(model: &Model, plan: &MaskPlan, batch: usize, seed: u64) -> f64 {
        let spec = &model.spec;
        let n = spec.input_grid.numel();
        let x = randn(&[batch, n, spec.in_channels], 1.0, seed ^ 5);
        let k = spec.output_channels().unwrap();
        let labels = (0..batch).map(|i| (i + seed as usize) % k).collect();
        let b = label_batch(x, labels);
        let (loss, tape) = forward(model, plan, &b).unwrap();
        let got = backward_with(&tape, true).unwrap();
        let want = oracle(model, Some(plan), &b);
        let mut dev = (loss - want.loss).abs();
        assert_eq!(got.grads.keys().collect::<Vec<_>>(), want.grads.keys().collect::<Vec<_>>());
        for (name, g) in &got.grads {
            dev = dev.max(max_rel_dev(g.data(), &want.grads[name]));
        }
        for (id, g) in &got.input_grads {
            dev = dev.max(max_rel_dev(g.data(), &want.input_grads[id]));
        }
        dev
    }

    pub fn mhsa(seed: u64, mode: DropMode) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, n, h, d, c) =
            (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..7));
        let hd = h * d;
        let mask = random_mask(&mut rng, &[n]);
        let dropped: Vec<usize> = (0..h).filter(|_| rng.random_bool(0.5)).collect();
        let hm = HeadMask { heads: h, dropped: dropped.clone() };
        let w: Vec<Tensor> = (0..4).map(|i| randn(&if i < 3 { [c, hd] } else { [hd, c] }, 0.6, seed ^ (10 + i))).collect();
        let layer = MhsaLayer::new(h, d, w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone(), mode).unwrap();
        let x = randn(&[b, n, c], 1.0, seed ^ 3);
        let up = randn(&[b, n, c], 1.0, seed ^ 4);
        let (_, cache) = mhsa_forward(&layer, &x).unwrap();
        let got = mhsa_backward_sbp(&layer, &cache, &up, &mask, mode, Some(&hm)).unwrap();
        let p = MhsaParams { heads: h, d, c, wq: w[0].data(), wk: w[1].data(), wv: w[2].data(), wo: w[3].data() };
        let f = mhsa_fwd(&p, x.data(), b, n);
        let keep = mask.keep_flags();
        let drop = MhsaDrop { mode, keep: &keep, dropped_heads: &dropped };
        let want = mhsa_bwd(&p, x.data(), &f, b, n, up.data(), Some(&drop));
        [
            (got.dwq.data(), &want.dwq),
            (got.dwk.data(), &want.dwk),
            (got.dwv.data(), &want.dwv),
            (got.dwo.data(), &want.dwo),
            (got.dx.data(), &want.dx),
        ]
        .iter()
        .map(|(a, b)| max_rel_dev(a, b))
        .fold(0.0, f64::max)
    }

    pub const KINDS: [&str; 5] = ["linear", "conv2d", "mhsa.query_only", "mhsa.qkv", "mhsa.head"];

    /// Instance `i` cycles through the operator kinds.
    pub fn run(i: u64) -> (&'static str, f64) {
        let seed = 0x5EED_0000 + i;
        let kind = KINDS[(i % 5) as usize];
        let dev = match i % 5 {
            0 => linear(seed),
            1 => conv(seed),
            2 => mhsa(seed, DropMode::QueryOnly),
            3 => mhsa(seed, DropMode::Qkv),
            _ => mhsa(seed, DropMode::Head),
        };
        (kind, dev)
    }
}

// ---------------------------------------------------------------------------
// central finite differences

pub mod fd {
    use super::*;
    use sbp_core::engine::{backward, forward};
    use sbp_core::network::{tiny_vit, VitShape};
    use sbp_core::ops::{
        conv2d_backward_full, conv2d_forward, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward_full,
        linear_forward, mhsa_backward_full, mhsa_forward, mse_loss, softmax_xent_loss, Conv2dLayer, LayerNorm, LinearLayer, MhsaLayer,
    };
    use sbp_core::tensor::Shape;

    pub const H: f64 = 1e-5;

    /// Central differences of `f` around `x`.
    pub fn grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut t = x.clone();
        (0..x.numel())
            .map(|i| {
                let v = x.data()[i];
                t.data_mut()[i] = v + H;
                let p = f(&t);
                t.data_mut()[i] = v - H;
                let m = f(&t);
                t.data_mut()[i] = v;
                (p - m) / (2.0 * H)
            })
            .collect()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// `(check name, relative error)` for every operator's full backward.
    pub fn operator_errors() -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut rec = |name: &str, analytic: &Tensor, numeric: Vec<f64>| out.push((name.to_string(), rel_err(analytic.data(), &numeric)));

        // linear
        let (x, w, b, up) = (randn(&[6, 4], 1.0, 1), randn(&[4, 3], 0.5, 2), randn(&[3], 0.5, 3), randn(&[6, 3], 1.0, 4));
        let g = linear_backward_full(&LinearLayer::new(w.clone(), Some(b.clone())).unwrap(), &x, &up).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&linear_forward(&LinearLayer::new(w.clone(), Some(b.clone())).unwrap(), x).unwrap(), &up);
        rec("linear.dw", &g.dw, grad(&w, |t| f(&x, t, &b)));
        rec("linear.db", g.db.as_ref().unwrap(), grad(&b, |t| f(&x, &w, t)));
        rec("linear.dx", &g.dx, grad(&x, |t| f(t, &w, &b)));

        // convolution over kernel/stride/padding combinations
        for (k, s, p, hw) in [(1, 1, 0, 3), (2, 2, 0, 4), (3, 1, 1, 4), (3, 2, 1, 5), (3, 3, 0, 6), (2, 1, 1, 3)] {
            let (x, w, b) = (randn(&[2, hw, hw, 2], 1.0, 5), randn(&[k, k, 2, 3], 0.5, 6), randn(&[3], 0.5, 7));
            let layer = |w: &Tensor, b: &Tensor| Conv2dLayer::new(w.clone(), Some(b.clone()), s, p).unwrap();
            let y = conv2d_forward(&layer(&w, &b), &x).unwrap();
            let up = randn(y.shape(), 1.0, 8);
            let g = conv2d_backward_full(&layer(&w, &b), &x, &up).unwrap();
            let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d_forward(&layer(w, b), x).unwrap(), &up);
            let tag = format!("conv2d.k{k}s{s}p{p}");
            rec(&format!("{tag}.dw"), &g.dw, grad(&w, |t| f(&x, t, &b)));
            rec(&format!("{tag}.db"), g.db.as_ref().unwrap(), grad(&b, |t| f(&x, &w, t)));
            rec(&format!("{tag}.dx"), &g.dx, grad(&x, |t| f(t, &w, &b)));
        }

        // attention
        let (h, d, c, n) = (2, 3, 4, 5);
        let ws: Vec<Tensor> = (0..4).map(|i| randn(&if i < 3 { [c, h * d] } else { [h * d, c] }, 0.5, 20 + i)).collect();
        let x = randn(&[2, n, c], 1.0, 30);
        let up = randn(&[2, n, c], 1.0, 31);
        let mk = |w: &[Tensor]| MhsaLayer::new(h, d, w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone(), DropMode::Qkv).unwrap();
        let (_, cache) = mhsa_forward(&mk(&ws), &x).unwrap();
        let g = mhsa_backward_full(&mk(&ws), &cache, &up).unwrap();
        let f = |x: &Tensor, w: &[Tensor]| dot(&mhsa_forward(&mk(w), x).unwrap().0, &up);
        for (i, (name, analytic)) in [("wq", &g.dwq), ("wk", &g.dwk), ("wv", &g.dwv), ("wo", &g.dwo)].into_iter().enumerate() {
            let numeric = grad(&ws[i], |t| {
                let mut w = ws.clone();
                w[i] = t.clone();
                f(&x, &w)
            });
            rec(&format!("mhsa.d{name}"), analytic, numeric);
        }
        rec("mhsa.dx", &g.dx, grad(&x, |t| f(t, &ws)));

        // layer norm
        let (x, gm, bt) = (randn(&[5, 6], 1.0, 40), randn(&[6], 1.0, 41), randn(&[6], 1.0, 42));
        let up = randn(&[5, 6], 1.0, 43);
        let ln = |g: &Tensor, b: &Tensor| LayerNorm::new(g.clone(), b.clone()).unwrap();
        let (_, cache) = layer_norm_forward(&ln(&gm, &bt), &x).unwrap();
        let g = layer_norm_backward(&ln(&gm, &bt), &cache, &up).unwrap();
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| dot(&layer_norm_forward(&ln(g, b), x).unwrap().0, &up);
        rec("layer_norm.dgamma", &g.dgamma, grad(&gm, |t| f(&x, t, &bt)));
        rec("layer_norm.dbeta", &g.dbeta, grad(&bt, |t| f(&x, &gm, t)));
        rec("layer_norm.dx", &g.dx, grad(&x, |t| f(t, &gm, &bt)));

        // gelu
        let (x, up) = (randn(&[4, 5], 2.0, 50), randn(&[4, 5], 1.0, 51));
        rec("gelu.dx", &gelu_backward(&x, &up).unwrap(), grad(&x, |t| dot(&gelu_forward(t), &up)));

        // losses
        let logits = randn(&[4, 3], 2.0, 60);
        let labels = [0, 2, 1, 2];
        rec("softmax_xent.dlogits", &softmax_xent_loss(&logits, &labels).unwrap().1, grad(&logits, |t| softmax_xent_loss(t, &labels).unwrap().0));
        let (pred, target) = (randn(&[4, 3], 1.0, 61), randn(&[4, 3], 1.0, 62));
        rec("mse.dpred", &mse_loss(&pred, &target).unwrap().1, grad(&pred, |t| mse_loss(t, &target).unwrap().0));
        out
    }

    /// Three blocks of width 8, two heads, MLP width 16.
    pub fn small_vit() -> Model {
        let shape = VitShape { dim: 8, heads: 2, blocks: 3, mlp_hidden: 16 };
        Model::init(tiny_vit(Shape::new(vec![2, 2]).unwrap(), 3, shape, 3, DropMode::Qkv), 17).unwrap()
    }

    /// Per-parameter relative error of the engine's full backward against
    /// central differences of the reference loss.
    pub fn vit_errors(model: &Model) -> Vec<(String, f64)> {
        let b = label_batch(randn(&[2, 4, 3], 1.0, 70), vec![1, 2]);
        let full = MaskPlan::full(&model.spec).unwrap();
        let (_, tape) = forward(model, &full, &b).unwrap();
        let g = backward(&tape).unwrap();
        let numeric = fd_grads(model, &b, H);
        g.grads.iter().map(|(k, t)| (k.clone(), rel_err(t.data(), &numeric[k]))).collect()
    }
}

// ---------------------------------------------------------------------------
// chain-rule structure

pub mod chain {
    use super::*;
    use instances::random_mask;
    use rand::RngExt;
    use sbp_core::analysis::{chain_rule_report, GradStatus};
    use sbp_core::engine::{backward_with, forward};
    use sbp_core::network::NetworkSpec;
    use sbp_core::ops::LossKind;
    use sbp_core::sampling::{grid_mask_with_phase, intersect_masks, IndexMask, KeepRatio};
    use sbp_core::tensor::Shape;

    fn dense(c_in: usize, c_out: usize, sbp: bool) -> LayerSpec {
        LayerSpec::Dense { c_in, c_out, bias: true, gelu: true, sbp }
    }

    fn with_head(mut layers: Vec<LayerSpec>, grid: &[usize], c_in: usize, width: usize) -> NetworkSpec {
        layers.push(LayerSpec::MeanPool);
        layers.push(LayerSpec::Dense { c_in: width, c_out: 2, bias: true, gelu: false, sbp: false });
        NetworkSpec { input_grid: Shape::new(grid.to_vec()).unwrap(), in_channels: c_in, layers, loss: LossKind::SoftmaxXent }
    }

    fn batch_for(spec: &NetworkSpec, seed: u64) -> Batch {
        let n = spec.input_grid.numel();
        label_batch(randn(&[2, n, spec.in_channels], 1.0, seed), vec![0, 1])
    }

    /// SBP and exact input gradients of every layer.
    fn input_grads(model: &Model, plan: &MaskPlan, b: &Batch) -> (BTreeMap<usize, Tensor>, BTreeMap<usize, Tensor>) {
        let sbp = backward_with(&forward(model, plan, b).unwrap().1, true).unwrap();
        let exact = backward_with(&forward(model, &MaskPlan::full(&model.spec).unwrap(), b).unwrap().1, true).unwrap();
        (sbp.input_grads, exact.input_grads)
    }

    /// One random pair of masks on two stacked point-wise layers: the bottom
    /// input gradient is exact on the intersection and zero elsewhere.
    pub fn intersection_law(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = [rng.random_range(1..5), rng.random_range(1..5)];
        let (a, b) = (random_mask(&mut rng, &grid), random_mask(&mut rng, &grid));
        let both = intersect_masks(&a, &b).unwrap();
        let spec = with_head(vec![dense(2, 3, true), dense(3, 3, true)], &grid, 2, 3);
        let model = Model::init(spec, seed).unwrap();
        let plan = MaskPlan::from_masks(&model.spec, vec![a, b]).unwrap();
        let batch = batch_for(&model.spec, seed ^ 9);
        let report = chain_rule_report(&model, &plan, &batch).unwrap();
        let predicted = &report.layers[0];
        if !report.verified || predicted.effective_keep != both.keep() {
            return false;
        }
        let (sbp, exact) = input_grads(&model, &plan, &batch);
        let n = both.total();
        let keep = both.keep_flags();
        (0..2 * n).all(|r| {
            let (s, e) = (sbp[&0].row(r), exact[&0].row(r));
            if keep[r % n] {
                s.iter().zip(e).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
            } else {
                s.iter().all(|&x| x == 0.0)
            }
        })
    }

    /// Complementary masks on two stacked point-wise layers; returns whether
    /// the bottom layer's input and weight gradients are exactly zero and
    /// the report flags vanishing.
    pub fn disjoint_vanishes() -> bool {
        let grid = [4, 4];
        let a = grid_mask_with_phase(&Shape::new(grid.to_vec()).unwrap(), KeepRatio::new(1, 2).unwrap(), 0).unwrap();
        let b = IndexMask::from_keep(a.shape().clone(), a.dropped().to_vec()).unwrap();
        let spec = with_head(vec![dense(3, 4, true), dense(4, 4, true)], &grid, 3, 4);
        let model = Model::init(spec, 2).unwrap();
        let plan = MaskPlan::from_masks(&model.spec, vec![a, b]).unwrap();
        let batch = batch_for(&model.spec, 3);
        let report = chain_rule_report(&model, &plan, &batch).unwrap();
        let g = sbp_core::engine::backward_with(&forward(&model, &plan, &batch).unwrap().1, true).unwrap();
        let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
        report.vanishing && report.verified && zero(&g.input_grads[&0]) && zero(&g.grads["00.w"]) && zero(&g.grads["00.b"])
    }

    /// Point-wise layer under a 3×3 stride-1 convolution, both with the same
    /// checkerboard. Returns the number of dropped conv-input positions whose
    /// gradient is nonzero, and whether the report verified.
    pub fn conv_neighbor_effect() -> (usize, bool) {
        let grid = [4, 4];
        let a = grid_mask_with_phase(&Shape::new(grid.to_vec()).unwrap(), KeepRatio::new(1, 2).unwrap(), 0).unwrap();
        let spec = with_head(
            vec![dense(2, 3, true), LayerSpec::Conv2d { kernel: 3, stride: 1, padding: 1, c_in: 3, c_out: 3, gelu: true, sbp: true }],
            &grid,
            2,
            3,
        );
        let model = Model::init(spec, 6).unwrap();
        let plan = MaskPlan::from_masks(&model.spec, vec![a.clone(), a.clone()]).unwrap();
        let batch = batch_for(&model.spec, 7);
        let report = chain_rule_report(&model, &plan, &batch).unwrap();
        let (sbp, _) = input_grads(&model, &plan, &batch);
        let n = a.total();
        let nonzero = a.dropped().iter().filter(|&&p| (0..2).any(|b| sbp[&1].row(b * n + p).iter().any(|&v| v != 0.0))).count();
        let approximate = report.layers[1].status.contains(&GradStatus::Approximate);
        (nonzero, report.verified && approximate && !report.layers[1].approximate_confirmed.is_empty())
    }

    /// A convolution with stride ≥ kernel under a random mask: every input
    /// position is classified exact or zero and the measurement agrees.
    pub fn stride_dichotomy(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..4);
        let s = rng.random_range(k..4);
        let (oh, ow) = (rng.random_range(1..4), rng.random_range(1..4));
        let grid = [(oh - 1) * s + k, (ow - 1) * s + k];
        let mask = random_mask(&mut rng, &[oh, ow]);
        let spec = with_head(vec![LayerSpec::Conv2d { kernel: k, stride: s, padding: 0, c_in: 2, c_out: 3, gelu: true, sbp: true }], &grid, 2, 3);
        let model = Model::init(spec, seed).unwrap();
        let plan = MaskPlan::from_masks(&model.spec, vec![mask]).unwrap();
        let report = chain_rule_report(&model, &plan, &batch_for(&model.spec, seed ^ 3)).unwrap();
        report.verified && report.layers[0].status.iter().all(|&st| st != GradStatus::Approximate)
    }
}

// ---------------------------------------------------------------------------
// memory contract

pub mod memory {
    use super::*;
    use sbp_core::engine::forward;
    use sbp_core::network::tiny_mlp;
    use sbp_core::ops::{linear_backward_sbp, mhsa_backward_sbp, mhsa_forward, LinearLayer, MhsaLayer};
    use sbp_core::sampling::{build_schedule, make_mask_plan, sample_grid_mask, IndexMask, KeepRatio, Sampler, ScheduleKind, Sharing};
    use sbp_core::tensor::Shape;

    pub fn poison_rows(t: &Tensor, rows: &[usize]) -> Tensor {
        let mut t = t.clone();
        let c = t.cols();
        for &r in rows {
            t.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = f64::NAN);
        }
        t
    }

    pub fn all_finite(ts: &[&Tensor]) -> bool {
        ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// SBP linear backward with dropped rows of `x` and the upstream gradient set
    /// to NaN: (all finite, equal to the clean result).
    pub fn poisoned_linear() -> (bool, bool) {
        let (b, n) = (3, 8);
        let mask = sample_grid_mask(&Shape::new(vec![n]).unwrap(), KeepRatio::new(1, 2).unwrap(), 4).unwrap();
        let (_, drop) = mask.batch_rows(b);
        let layer = LinearLayer::new(randn(&[5, 4], 0.5, 1), Some(randn(&[4], 0.5, 2))).unwrap();
        let (x, up) = (randn(&[b * n, 5], 1.0, 3), randn(&[b * n, 4], 1.0, 4));
        let clean = linear_backward_sbp(&layer, &x, &up, &mask).unwrap();
        let dirty = linear_backward_sbp(&layer, &poison_rows(&x, &drop), &poison_rows(&up, &drop), &mask).unwrap();
        (all_finite(&[&dirty.dw, dirty.db.as_ref().unwrap(), &dirty.dx]), clean == dirty)
    }

    /// Poisons every cache entry at a dropped token: rows of `x, Q, K, V, A` and
    /// rows and columns of `M, S`.
    pub fn poisoned_mhsa(mode: DropMode) -> (bool, bool) {
        let (b, n, h, d, c) = (2, 6, 2, 3, 5);
        let mask = IndexMask::from_keep(Shape::new(vec![n]).unwrap(), [0, 2, 3]).unwrap();
        let w: Vec<Tensor> = (0..4).map(|i| randn(&if i < 3 { [c, h * d] } else { [h * d, c] }, 0.5, 10 + i)).collect();
        let layer = MhsaLayer::new(h, d, w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone(), mode).unwrap();
        let x = randn(&[b, n, c], 1.0, 20);
        let up = randn(&[b, n, c], 1.0, 21);
        let (_, cache) = mhsa_forward(&layer, &x).unwrap();
        let clean = mhsa_backward_sbp(&layer, &cache, &up, &mask, mode, None).unwrap();
        let (_, drop) = mask.batch_rows(b);
        let mut dirty = cache.clone();
        let rows_only = mode == DropMode::QueryOnly;
        if !rows_only {
            dirty.x = poison_rows(&cache.x, &drop);
            dirty.a = poison_rows(&cache.a, &drop);
            dirty.k = poison_rows(&cache.k, &drop);
            dirty.v = poison_rows(&cache.v, &drop);
        }
        dirty.q = poison_rows(&cache.q, &drop);
        // query-only reads all of S
        for (t, is_m) in [(&mut dirty.m, true), (&mut dirty.s, false)] {
            if !rows_only || is_m {
                for bh in 0..b * h {
                    for &i in mask.dropped() {
                        for l in 0..n {
                            t.data_mut()[(bh * n + i) * n + l] = f64::NAN;
                            if !rows_only {
                                t.data_mut()[(bh * n + l) * n + i] = f64::NAN;
                            }
                        }
                    }
                }
            }
        }
        let up_dirty = if rows_only { up.clone() } else { poison_rows(&up.reshape([b * n, c]).unwrap(), &drop).reshape([b, n, c]).unwrap() };
        let got = mhsa_backward_sbp(&layer, &dirty, &up_dirty, &mask, mode, None).unwrap();
        (all_finite(&[&got.dwq, &got.dwk, &got.dwv, &got.dwo, &got.dx]), got == clean)
    }

    pub fn uniform_plan(model: &Model, r: KeepRatio, sampler: Sampler, seed: u64) -> MaskPlan {
        let n = model.spec.sbp_sites().unwrap().len();
        make_mask_plan(&model.spec, &build_schedule(ScheduleKind::Uniform, r, n).unwrap(), sampler, Sharing::Shared, seed).unwrap()
    }

    /// Cached elements over the SBP layers of a 4-layer point-wise stack, as
    /// `(ratio, sbp, full)` for several ratios and both samplers.
    pub fn linear_stack_counts() -> Vec<(KeepRatio, usize, usize)> {
        let spec = tiny_mlp(Shape::new(vec![4, 4]).unwrap(), 3, 6, 4, 2).with_sbp_fraction(1.0).unwrap();
        let model = Model::init(spec, 1).unwrap();
        let batch = label_batch(randn(&[3, 16, 3], 1.0, 2), vec![0, 1, 1]);
        let sbp_ids: Vec<usize> = model.spec.sbp_sites().unwrap().iter().map(|s| s.layer_id).collect();
        assert_eq!(sbp_ids, vec![0, 1, 2, 3]);
        let full = forward(&model, &MaskPlan::full(&model.spec).unwrap(), &batch).unwrap().1.cached_by_layer();
        let full_sum: usize = sbp_ids.iter().map(|i| full[i]).sum();
        let mut out = Vec::new();
        for (p, q) in [(1, 2), (1, 4), (3, 4), (1, 16), (1, 1)] {
            let r = KeepRatio::new(p, q).unwrap();
            for sampler in [Sampler::Grid, Sampler::Random] {
                let plan = uniform_plan(&model, r, sampler, 7);
                let got = forward(&model, &plan, &batch).unwrap().1.cached_by_layer();
                out.push((r, sbp_ids.iter().map(|i| got[i]).sum(), full_sum));
            }
        }
        out
    }
}
