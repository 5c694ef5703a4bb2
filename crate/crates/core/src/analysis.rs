//! Gradient-fidelity diagnostics, the activation memory model and chain-rule
//! structure reports.

use crate::engine::{backward, backward_with, forward, receptive_union, Batch, GradientStore, Model};
use crate::error::{config_err, dim_err, Result};
use crate::network::{head_dim, param_name, LayerSpec, NetworkSpec, ParamStore};
use crate::ops::{ConvGeometry, DropMode};
use crate::sampling::{IndexMask, KeepRatio, MaskPlan, MaskPlanFactory};
use num_rational::Ratio;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

// ---------------------------------------------------------------------------
// Cosine similarity and gradient reports

/// Cosine similarity with the zero-vector conventions: both zero gives 1.0,
/// exactly one zero gives 0.0 and sets `flagged`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub flagged: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2 = a.iter().map(|x| x * x).sum::<f64>();
    let nb2 = b.iter().map(|x| x * x).sum::<f64>();
    Ok(match (na2 == 0.0, nb2 == 0.0) {
        (true, true) => Cosine { value: 1.0, flagged: false },
        (true, false) | (false, true) => Cosine { value: 0.0, flagged: true },
        // sqrt of the product makes identical vectors come out at exactly 1
        _ => Cosine { value: (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0), flagged: false },
    })
}

/// One weight tensor in one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub batch: usize,
    pub layer_id: usize,
    /// Layer kind and parameter, e.g. `block.attn.wq`.
    pub layer_kind: String,
    pub cosine: f64,
    /// `‖dW_SBP‖₂`
    pub l2_norm: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub batch: usize,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn mean_cosine(&self) -> f64 {
        self.rows.iter().map(|r| r.cosine).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Weight matrices (not biases or norm gains) of a network: layer id, label, store key.
pub fn weight_params(spec: &NetworkSpec) -> Vec<(usize, String, String)> {
    let mut out = Vec::new();
    for (id, l) in spec.layers.iter().enumerate() {
        for (name, _) in l.param_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            if leaf == "w" || name.starts_with("attn.") {
                out.push((id, format!("{}.{name}", l.kind_name()), param_name(id, &name)));
            }
        }
    }
    out
}

/// Compares per-layer weight gradients of exact backprop with SBP under a
/// freshly drawn mask plan, batch by batch, with the weights frozen.
pub fn grad_similarity_experiment(model: &Model, factory: &MaskPlanFactory, data: &[Batch]) -> Result<Vec<GradReport>> {
    if data.is_empty() {
        return Err(config_err!("gradient similarity experiment needs at least one batch"));
    }
    let full_plan = MaskPlan::full(&model.spec)?;
    let weights = weight_params(&model.spec);
    data.par_iter()
        .enumerate()
        .map(|(i, batch)| {
            let exact = backward(&forward(model, &full_plan, batch)?.1)?;
            let plan = factory.plan_for_step(&model.spec, i as u64)?;
            let sbp = backward(&forward(model, &plan, batch)?.1)?;
            let rows = weights
                .iter()
                .map(|(id, label, key)| {
                    let (a, b) = (&sbp.grads[key], &exact.grads[key]);
                    let c = cosine_similarity(a.data(), b.data())?;
                    Ok(GradRow { batch: i, layer_id: *id, layer_kind: label.clone(), cosine: c.value, l2_norm: a.l2_norm(), flagged: c.flagged })
                })
                .collect::<Result<_>>()?;
            Ok(GradReport { batch: i, rows })
        })
        .collect()
}

pub const GRAD_CSV_HEADER: &str = "batch,layer_id,layer_kind,cosine,l2_norm";

pub fn write_grad_csv<W: Write>(mut w: W, reports: &[GradReport]) -> std::io::Result<()> {
    writeln!(w, "{GRAD_CSV_HEADER}")?;
    for r in reports {
        for row in &r.rows {
            writeln!(w, "{},{},{},{},{}", row.batch, row.layer_id, row.layer_kind, row.cosine, row.l2_norm)?;
        }
    }
    Ok(())
}

/// Mean with a bootstrap percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Percentile bootstrap interval of the mean at `level` (e.g. 0.95).
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() || resamples == 0 {
        return Err(config_err!("bootstrap needs data and at least one resample"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(config_err!("confidence level must lie in (0, 1), got {level}"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(Interval { mean, low: at(tail), high: at(1.0 - tail) })
}

/// Interval for `mean(a − b)` over paired observations.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if a.len() != b.len() {
        return Err(dim_err!("paired samples of lengths {} and {}", a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap_mean_ci(&diffs, resamples, level, seed)
}

/// Per-batch mean cosine over the weight tensors accepted by `keep`.
pub fn batch_mean_cosines(reports: &[GradReport], keep: impl Fn(&GradRow) -> bool) -> Vec<f64> {
    reports
        .iter()
        .map(|r| {
            let sel: Vec<f64> = r.rows.iter().filter(|row| keep(row)).map(|row| row.cosine).collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSummary {
    pub variant: String,
    pub batches: usize,
    pub mean_cosine: Interval,
    pub per_layer_mean: BTreeMap<String, f64>,
    pub flagged: usize,
}

pub fn summarize(variant: &str, reports: &[GradReport], seed: u64) -> Result<GradSummary> {
    let means = batch_mean_cosines(reports, |_| true);
    let mut per_layer: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut flagged = 0;
    for row in reports.iter().flat_map(|r| &r.rows) {
        let e = per_layer.entry(format!("{:02}.{}", row.layer_id, row.layer_kind)).or_insert((0.0, 0));
        e.0 += row.cosine;
        e.1 += 1;
        flagged += row.flagged as usize;
    }
    Ok(GradSummary {
        variant: variant.to_string(),
        batches: reports.len(),
        mean_cosine: bootstrap_mean_ci(&means, 2000, 0.95, seed)?,
        per_layer_mean: per_layer.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        flagged,
    })
}

// ---------------------------------------------------------------------------
// Memory model

/// Analytic attention memory ratio of a drop mode relative to full caching,
/// for token count `n` and head width `d`:
///
/// * query only: `(r(d/n + 2) + 2d/n) / ((d/n + 2) + 2d/n)`
/// * qkv: `r(3 + 2r·d/n) / (3 + 2d/n)`
pub fn mhsa_memory_ratio(r: KeepRatio, d: u64, n: u64, mode: DropMode) -> Result<Ratio<u128>> {
    if d == 0 || n == 0 {
        return Err(config_err!("head width and token count must be positive"));
    }
    let r = Ratio::new(r.numer() as u128, r.denom() as u128);
    let (d, n) = (Ratio::from_integer(d as u128), Ratio::from_integer(n as u128));
    let two = Ratio::from_integer(2u128);
    let three = Ratio::from_integer(3u128);
    let dn = d / n;
    match mode {
        DropMode::QueryOnly => Ok((r * (dn + two) + two * dn) / ((dn + two) + two * dn)),
        DropMode::Qkv => Ok(r * (three + two * r * dn) / (three + two * dn)),
        DropMode::Head => Err(config_err!("head dropping has no analytic memory model")),
    }
}

pub fn ratio_to_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Cached elements of one attention block, split the way the memory model
/// charges them (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhsaBreakdown {
    /// block input and attention output, `2hdn` when `C = hd`
    pub io: usize,
    /// `Q`, `K`, `V`: `3hdn`
    pub qkv: usize,
    /// `M` and `S`: `2hnn`
    pub maps: usize,
}

impl MhsaBreakdown {
    pub fn total(&self) -> usize {
        self.io + self.qkv + self.maps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub layer_id: usize,
    pub kind: String,
    pub full: usize,
    pub sbp: usize,
    pub mhsa_full: Option<MhsaBreakdown>,
    pub mhsa_sbp: Option<MhsaBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub batch: usize,
    pub layers: Vec<LayerMemory>,
    pub total_full: usize,
    pub total_sbp: usize,
    pub ratio: f64,
}

fn attention_cache(c: usize, h: usize, d: usize, n: usize, k: usize, mode: Option<DropMode>) -> MhsaBreakdown {
    let hd = h * d;
    match mode {
        None | Some(DropMode::Head) => MhsaBreakdown { io: n * c + n * hd, qkv: 3 * n * hd, maps: 2 * h * n * n },
        Some(DropMode::QueryOnly) => MhsaBreakdown { io: n * c + n * hd, qkv: k * hd + 2 * n * hd, maps: h * k * n + h * n * n },
        Some(DropMode::Qkv) => MhsaBreakdown { io: k * c + k * hd, qkv: 3 * k * hd, maps: 2 * h * k * k },
    }
}

/// Per-sample cached elements of one layer with `mask` (full when `None`).
fn layer_cache(
    layer: &LayerSpec,
    in_grid_n: usize,
    conv: Option<ConvGeometry>,
    mask: Option<&IndexMask>,
    heads_dropped: bool,
) -> (usize, Option<MhsaBreakdown>) {
    let n = in_grid_n;
    let kept = |total: usize| mask.map_or(total, |m| m.keep().len());
    match *layer {
        LayerSpec::Dense { c_in, c_out, gelu, .. } => (kept(n) * (c_in + if gelu { c_out } else { 0 }), None),
        LayerSpec::LayerNorm { dim, .. } => (kept(n) * (dim + 1), None),
        LayerSpec::Conv2d { c_in, c_out, gelu, .. } => {
            let g = conv.expect("conv geometry");
            let all: Vec<usize> = (0..g.out_h * g.out_w).collect();
            let keep = mask.map_or(&all[..], |m| m.keep());
            let union = receptive_union(&g, keep).len();
            (union * c_in + if gelu { keep.len() * c_out } else { 0 }, None)
        }
        LayerSpec::Block { dim, heads, mlp_hidden, drop_mode, .. } => {
            let d = head_dim(dim, heads);
            let k = kept(n);
            let mode = match (mask, drop_mode) {
                (None, _) => None,
                (Some(_), DropMode::Head) if !heads_dropped => None,
                (Some(m), DropMode::QueryOnly | DropMode::Qkv) if m.is_full() => None,
                (Some(_), m) => Some(m),
            };
            let attn = attention_cache(dim, heads, d, n, k, mode);
            let ln1_rows = if mask.is_some() && drop_mode == DropMode::Qkv { k } else { n };
            let rest = ln1_rows * (dim + 1) + k * (dim + 1) + k * (dim + mlp_hidden) + k * mlp_hidden;
            (attn.total() + rest, Some(attn))
        }
        LayerSpec::MeanPool => (0, None),
    }
}

/// Cached activation elements per layer for a batch of `batch` samples, with
/// every position kept and under `plan`.
pub fn activation_memory_estimate(spec: &NetworkSpec, plan: &MaskPlan, batch: usize) -> Result<MemoryReport> {
    let io = spec.trace()?;
    let mut layers = Vec::with_capacity(io.len());
    for (id, (layer, lio)) in spec.layers.iter().zip(&io).enumerate() {
        let conv = match *layer {
            LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                Some(ConvGeometry::new(kernel, stride, padding, lio.in_grid.dims()[0], lio.in_grid.dims()[1])?)
            }
            _ => None,
        };
        let entry = if layer.sbp() {
            let e = plan.entry(id).ok_or_else(|| config_err!("mask plan has no entry for SBP layer {id}"))?;
            if e.mask.shape() != &lio.out_grid {
                return Err(dim_err!("layer {id} mask is on {}, layer grid is {}", e.mask.shape(), lio.out_grid));
            }
            Some(e)
        } else {
            None
        };
        let n = lio.in_grid.numel();
        let (full, mf) = layer_cache(layer, n, conv, None, false);
        let heads_dropped = entry.and_then(|e| e.heads.as_ref()).is_some_and(|h| !h.dropped.is_empty());
        let (sbp, ms) = layer_cache(layer, n, conv, entry.map(|e| &*e.mask), heads_dropped);
        layers.push(LayerMemory {
            layer_id: id,
            kind: layer.kind_name().to_string(),
            full: full * batch,
            sbp: sbp * batch,
            mhsa_full: mf,
            mhsa_sbp: ms,
        });
    }
    let total_full: usize = layers.iter().map(|l| l.full).sum();
    let total_sbp: usize = layers.iter().map(|l| l.sbp).sum();
    Ok(MemoryReport { batch, layers, total_full, total_sbp, ratio: total_sbp as f64 / total_full.max(1) as f64 })
}

// ---------------------------------------------------------------------------
// Chain-rule structure

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradStatus {
    /// Equal to exact backprop.
    Exact,
    /// Exactly zero.
    Zero,
    /// Neither, in general.
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLayer {
    pub layer_id: usize,
    pub kind: String,
    /// Positions of the layer input whose gradient is not structurally zero.
    pub effective_keep: Vec<usize>,
    /// Fraction of exactly-zero entries of the measured input gradient.
    pub sparsity: f64,
    pub status: Vec<GradStatus>,
    /// Positions where the measured gradient contradicts an `Exact`/`Zero` claim.
    pub violations: Vec<usize>,
    /// `Approximate` positions whose gradient is neither zero nor exact.
    pub approximate_confirmed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRuleReport {
    pub layers: Vec<ChainLayer>,
    /// The lowest layer's input gradient is zero everywhere.
    pub vanishing: bool,
    pub verified: bool,
}

/// Predicts, layer by layer from the top, which input-gradient positions are
/// exact, zero or approximate under the plan, then checks the prediction
/// against measured SBP and exact gradients.
pub fn chain_rule_report(model: &Model, plan: &MaskPlan, batch: &Batch) -> Result<ChainRuleReport> {
    let spec = &model.spec;
    let io = spec.trace()?;
    for (id, l) in spec.layers.iter().enumerate() {
        if matches!(l, LayerSpec::Block { .. } | LayerSpec::LayerNorm { .. }) {
            return Err(config_err!("chain-rule report covers point-wise and conv layers only; layer {id} is {}", l.kind_name()));
        }
    }
    let exact = backward_with(&forward(model, &MaskPlan::full(spec)?, batch)?.1, true)?;
    let sbp = backward_with(&forward(model, plan, batch)?.1, true)?;
    // status of the gradient arriving at the current layer's output
    let mut above: Vec<GradStatus> = vec![GradStatus::Exact; 1];
    let mut layers = Vec::new();
    for (id, (layer, lio)) in spec.layers.iter().zip(&io).enumerate().rev() {
        let mask = if layer.sbp() { plan.entry(id).map(|e| &*e.mask) } else { None };
        let out_status: Vec<GradStatus> = match mask {
            Some(m) => {
                let flags = m.keep_flags();
                above.iter().zip(flags).map(|(&s, k)| if k { s } else { GradStatus::Zero }).collect()
            }
            None => above.clone(),
        };
        let status: Vec<GradStatus> = match *layer {
            LayerSpec::MeanPool => {
                let s = out_status[0];
                vec![s; lio.in_grid.numel()]
            }
            LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                let g = ConvGeometry::new(kernel, stride, padding, lio.in_grid.dims()[0], lio.in_grid.dims()[1])?;
                (0..g.in_h * g.in_w)
                    .map(|p| {
                        let from: Vec<GradStatus> =
                            g.contributors(p / g.in_w, p % g.in_w).into_iter().map(|(oy, ox)| out_status[oy * g.out_w + ox]).collect();
                        if from.iter().all(|&s| s == GradStatus::Zero) {
                            GradStatus::Zero
                        } else if from.iter().all(|&s| s == GradStatus::Exact) {
                            GradStatus::Exact
                        } else {
                            GradStatus::Approximate
                        }
                    })
                    .collect()
            }
            _ => out_status,
        };
        let tokens = lio.in_grid.numel();
        let (dx_s, dx_e) = (&sbp.input_grads[&id], &exact.input_grads[&id]);
        let c = dx_s.cols();
        let mut violations = Vec::new();
        let mut confirmed = Vec::new();
        for (p, &st) in status.iter().enumerate() {
            let rows: Vec<usize> = (0..batch.size()).map(|b| b * tokens + p).collect();
            let is_zero = rows.iter().all(|&r| dx_s.row(r).iter().all(|&v| v == 0.0));
            let is_exact = rows.iter().all(|&r| dx_s.row(r).iter().zip(dx_e.row(r)).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
            match st {
                GradStatus::Zero if !is_zero => violations.push(p),
                GradStatus::Exact if !is_exact => violations.push(p),
                GradStatus::Approximate if !is_zero && !is_exact => confirmed.push(p),
                _ => {}
            }
        }
        let zeros = dx_s.data().iter().filter(|&&v| v == 0.0).count();
        layers.push(ChainLayer {
            layer_id: id,
            kind: layer.kind_name().to_string(),
            effective_keep: (0..status.len()).filter(|&p| status[p] != GradStatus::Zero).collect(),
            sparsity: zeros as f64 / (dx_s.rows() * c).max(1) as f64,
            status: status.clone(),
            violations,
            approximate_confirmed: confirmed,
        });
        above = status;
    }
    layers.reverse();
    let vanishing = layers.first().is_some_and(|l| l.effective_keep.is_empty());
    let verified = layers.iter().all(|l| l.violations.is_empty());
    Ok(ChainRuleReport { layers, vanishing, verified })
}

// ---------------------------------------------------------------------------
// Training traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    /// `‖dW‖₂` per parameter per step.
    pub series: BTreeMap<String, Vec<f64>>,
    /// Parameters whose gradient norm was exactly zero for `window` consecutive steps.
    pub flagged: Vec<String>,
}

pub fn l2_norm_trace(steps: &[GradientStore], window: usize) -> NormTrace {
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for g in steps {
        for (k, t) in &g.grads {
            series.entry(k.clone()).or_default().push(t.l2_norm());
        }
    }
    NormTrace::from_series(series, window)
}

impl NormTrace {
    pub fn from_series(series: BTreeMap<String, Vec<f64>>, window: usize) -> NormTrace {
        let flagged = series
            .iter()
            .filter(|(_, v)| {
                let mut run = 0;
                window > 0
                    && v.iter().any(|&x| {
                        run = if x == 0.0 { run + 1 } else { 0 };
                        run >= window
                    })
            })
            .map(|(k, _)| k.clone())
            .collect();
        NormTrace { series, flagged }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSimilarity {
    pub per_param: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Cosine similarity of two models' weights at matching checkpoints.
pub fn weight_similarity_trace(a: &[ParamStore], b: &[ParamStore]) -> Result<Vec<WeightSimilarity>> {
    if a.len() != b.len() {
        return Err(dim_err!("{} checkpoints vs {}", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .map(|(pa, pb)| {
            if pa.keys().ne(pb.keys()) {
                return Err(dim_err!("checkpoints hold different parameters"));
            }
            let mut per_param = BTreeMap::new();
            let (mut fa, mut fb) = (Vec::new(), Vec::new());
            for (k, ta) in pa {
                let tb = &pb[k];
                per_param.insert(k.clone(), cosine_similarity(ta.data(), tb.data())?.value);
                fa.extend_from_slice(ta.data());
                fb.extend_from_slice(tb.data());
            }
            Ok(WeightSimilarity { per_param, overall: cosine_similarity(&fa, &fb)?.value })
        })
        .collect()
}

/// Fraction of positions where two label lists agree.
pub fn prediction_consistency(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("prediction lists of lengths {} and {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(config_err!("prediction consistency of empty lists"));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}
