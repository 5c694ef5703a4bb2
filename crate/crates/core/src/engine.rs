//! Tape-based reverse mode over a [`NetworkSpec`], with stochastic
//! backpropagation at SBP-enabled layers.
//!
//! The forward pass is always exact. At an SBP layer, the row-wise operators
//! run through [`sbp_wrap`]: kept rows are evaluated with recording and
//! dropped rows without, so only kept-row activations reach the tape. The
//! backward pass then treats the layer's upstream gradient as zero at dropped
//! positions, reading nothing but the recorded rows.
//!
//! Inside a transformer block the token mask applies to every sub-operator
//! of the MLP branch (norm, both linear maps, the activation). The attention
//! branch follows the block's drop mode: `qkv` also masks the first norm,
//! `query_only` and `head` leave it fully recorded because their input
//! gradient is dense over tokens.

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::network::{head_dim, param_name, LayerSpec, NetworkSpec, ParamStore};
use crate::ops::linear::mask_rows;
use crate::ops::{
    conv2d_backward_full, conv2d_forward, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward_full, linear_forward,
    mhsa_backward_full, mhsa_backward_kept, mhsa_forward, mse_loss, restrict_cache, softmax_xent_loss, Conv2dLayer, ConvGeometry, DropMode,
    LayerNorm, LinearLayer, LossKind, MhsaCache, MhsaKept, MhsaLayer, NormCache,
};
use crate::sampling::{HeadMask, IndexMask, MaskPlan};
use crate::tensor::{gather_rows, scatter_rows_add, Shape, Tensor};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Network description plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: NetworkSpec, params: ParamStore) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Model { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = spec.init_params(seed)?;
        Ok(Model { spec, params })
    }

    fn p(&self, id: usize, name: &str) -> Result<Tensor> {
        let key = param_name(id, name);
        self.params.get(&key).cloned().ok_or_else(|| contract_err!("missing parameter {key}"))
    }

    fn linear(&self, id: usize, prefix: &str, bias: bool) -> Result<LinearLayer> {
        let b = if bias { Some(self.p(id, &format!("{prefix}b"))?) } else { None };
        LinearLayer::new(self.p(id, &format!("{prefix}w"))?, b)
    }

    fn norm(&self, id: usize, prefix: &str) -> Result<LayerNorm> {
        LayerNorm::new(self.p(id, &format!("{prefix}gamma"))?, self.p(id, &format!("{prefix}beta"))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    Values(Tensor),
}

/// `x` is `B × N × C` with `N` the number of grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub target: Target,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

// ---------------------------------------------------------------------------
// Row-wise operators and the keep/drop split

/// Parameter gradients (by local name) and the input gradient of kept rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads {
    pub params: Vec<(&'static str, Tensor)>,
    pub dx: Tensor,
}

/// An operator that treats every row independently.
pub trait RowOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Evaluates a row subset; with `record`, also returns what backward needs.
    fn forward_rows(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>)>;
    fn has_backward(&self) -> bool {
        true
    }
    fn backward_rows(&self, _cache: &[Tensor], _upstream: &Tensor) -> Result<RowGrads> {
        Err(config_err!("operator {} has no backward rule", self.name()))
    }
}

/// Activations recorded for the kept rows of one row-wise operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRecord {
    pub keep_rows: Vec<usize>,
    pub n_rows: usize,
    pub cache: Vec<Tensor>,
}

impl RowRecord {
    pub fn numel(&self) -> usize {
        self.cache.iter().map(Tensor::numel).sum()
    }

    fn is_full(&self) -> bool {
        self.keep_rows.len() == self.n_rows
    }
}

/// Runs `op` on every row of `x`: kept rows with recording, dropped rows
/// without. The returned output is exact at every row.
pub fn sbp_wrap(op: &dyn RowOp, x: &Tensor, mask: &IndexMask) -> Result<(Tensor, RowRecord)> {
    if !op.has_backward() {
        return Err(config_err!("operator {} has no backward rule and cannot be recorded", op.name()));
    }
    let n = x.rows();
    let (keep, drop) = mask_rows(mask, n)?;
    let x = x.as_matrix();
    if drop.is_empty() {
        let (y, cache) = op.forward_rows(&x, true)?;
        return Ok((y, RowRecord { keep_rows: keep, n_rows: n, cache }));
    }
    let (y_keep, cache) = op.forward_rows(&gather_rows(&x, &keep)?, true)?;
    let (y_drop, _) = op.forward_rows(&gather_rows(&x, &drop)?, false)?;
    let c_out = if keep.is_empty() { y_drop.cols() } else { y_keep.cols() };
    let y = scatter_rows_add(&Tensor::zeros([n, c_out]), &keep, &y_keep)?;
    let y = scatter_rows_add(&y, &drop, &y_drop)?;
    Ok((y, RowRecord { keep_rows: keep, n_rows: n, cache }))
}

/// Backward of a recorded row-wise op: only the kept rows of `upstream` are read.
pub fn row_backward(op: &dyn RowOp, rec: &RowRecord, upstream: &Tensor) -> Result<RowGrads> {
    let up = upstream.as_matrix();
    if up.rows() != rec.n_rows {
        return Err(dim_err!("{} upstream has {} rows, record has {}", op.name(), up.rows(), rec.n_rows));
    }
    if rec.is_full() {
        return op.backward_rows(&rec.cache, &up);
    }
    let g = op.backward_rows(&rec.cache, &gather_rows(&up, &rec.keep_rows)?)?;
    let dx = scatter_rows_add(&Tensor::zeros([rec.n_rows, g.dx.cols()]), &rec.keep_rows, &g.dx)?;
    Ok(RowGrads { params: g.params, dx })
}

/// Linear map, optionally followed by GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOp {
    pub layer: LinearLayer,
    pub gelu: bool,
}

impl RowOp for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward_rows(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let pre = linear_forward(&self.layer, x)?;
        let out = if self.gelu { gelu_forward(&pre) } else { pre.clone() };
        let cache = match (record, self.gelu) {
            (false, _) => vec![],
            (true, false) => vec![x.clone()],
            (true, true) => vec![x.clone(), pre],
        };
        Ok((out, cache))
    }

    fn backward_rows(&self, cache: &[Tensor], upstream: &Tensor) -> Result<RowGrads> {
        let d_pre = if self.gelu { gelu_backward(&cache[1], upstream)? } else { upstream.clone() };
        let g = linear_backward_full(&self.layer, &cache[0], &d_pre)?;
        let mut params = vec![("w", g.dw)];
        if let Some(db) = g.db {
            params.push(("b", db));
        }
        Ok(RowGrads { params, dx: g.dx })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormOp {
    pub ln: LayerNorm,
}

impl RowOp for NormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward_rows(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let (y, c) = layer_norm_forward(&self.ln, x)?;
        let cache = if record {
            let n = c.inv_std.len();
            vec![c.xhat, Tensor::new([n, 1], c.inv_std)?]
        } else {
            vec![]
        };
        Ok((y, cache))
    }

    fn backward_rows(&self, cache: &[Tensor], upstream: &Tensor) -> Result<RowGrads> {
        let c = NormCache { xhat: cache[0].clone(), inv_std: cache[1].data().to_vec() };
        let g = layer_norm_backward(&self.ln, &c, upstream)?;
        Ok(RowGrads { params: vec![("gamma", g.dgamma), ("beta", g.dbeta)], dx: g.dx })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeluOp;

impl RowOp for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn forward_rows(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((gelu_forward(x), if record { vec![x.clone()] } else { vec![] }))
    }

    fn backward_rows(&self, cache: &[Tensor], upstream: &Tensor) -> Result<RowGrads> {
        Ok(RowGrads { params: vec![], dx: gelu_backward(&cache[0], upstream)? })
    }
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone)]
enum AttnRecord {
    Full(MhsaCache),
    Kept(MhsaKept),
}

#[derive(Debug, Clone)]
struct BlockRecord {
    ln1: (NormOp, RowRecord),
    attn_layer: MhsaLayer,
    attn: AttnRecord,
    ln2: (NormOp, RowRecord),
    fc1: (DenseOp, RowRecord),
    fc2: (DenseOp, RowRecord),
    heads: Option<HeadMask>,
    batch: usize,
    tokens: usize,
}

#[derive(Debug, Clone)]
enum Record {
    Dense(DenseOp, RowRecord),
    Norm(NormOp, RowRecord),
    Conv {
        layer: Conv2dLayer,
        geom: ConvGeometry,
        batch: usize,
        /// Input positions (per sample) inside some kept output's receptive field.
        needed: Vec<usize>,
        x_needed: Tensor,
        gelu: Option<RowRecord>,
    },
    Block(Box<BlockRecord>),
    Pool {
        batch: usize,
        tokens: usize,
    },
}

impl Record {
    fn numel(&self) -> usize {
        match self {
            Record::Dense(_, r) | Record::Norm(_, r) => r.numel(),
            Record::Conv { x_needed, gelu, .. } => x_needed.numel() + gelu.as_ref().map_or(0, RowRecord::numel),
            Record::Block(b) => {
                let attn = match &b.attn {
                    AttnRecord::Full(c) => c.numel(),
                    AttnRecord::Kept(k) => k.numel(),
                };
                b.ln1.1.numel() + attn + b.ln2.1.numel() + b.fc1.1.numel() + b.fc2.1.numel()
            }
            Record::Pool { .. } => 0,
        }
    }
}

/// One executed layer.
#[derive(Debug, Clone)]
pub struct TapeEntry {
    pub layer_id: usize,
    pub kind: &'static str,
    /// Mask used at this layer, `None` for fully recorded layers.
    pub mask: Option<Arc<IndexMask>>,
    pub cached_elements: usize,
    record: Record,
}

/// Executed layers in forward order with their recorded activations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub entries: Vec<TapeEntry>,
    /// Total activation elements held by the tape.
    pub cached_elements: usize,
    pub loss: Option<f64>,
    pub logits: Option<Tensor>,
    dlogits: Option<Tensor>,
}

impl Tape {
    pub fn is_complete(&self) -> bool {
        self.dlogits.is_some()
    }

    pub fn cached_by_layer(&self) -> BTreeMap<usize, usize> {
        self.entries.iter().map(|e| (e.layer_id, e.cached_elements)).collect()
    }
}

/// `∇_Θ L` plus, on request, the gradient with respect to every layer's input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientStore {
    pub grads: BTreeMap<String, Tensor>,
    pub input_grads: BTreeMap<usize, Tensor>,
}

impl GradientStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

fn plan_mask(plan: &MaskPlan, id: usize, grid: &Shape) -> Result<(Arc<IndexMask>, Option<HeadMask>)> {
    let e = plan.entry(id).ok_or_else(|| config_err!("mask plan has no entry for SBP layer {id}"))?;
    if e.mask.shape() != grid {
        return Err(dim_err!("layer {id} runs on grid {grid}, its mask is on {}", e.mask.shape()));
    }
    Ok((Arc::clone(&e.mask), e.heads.clone()))
}

/// Forward pass up to the network output, recording the tape.
pub fn forward_logits(model: &Model, plan: &MaskPlan, x: &Tensor) -> Result<(Tensor, Tape)> {
    let spec = &model.spec;
    let io = spec.trace()?;
    let s = x.shape();
    if s.len() != 3 || s[1] != spec.input_grid.numel() || s[2] != spec.in_channels {
        return Err(dim_err!("batch must be B×{}×{}, got {s:?}", spec.input_grid.numel(), spec.in_channels));
    }
    let batch = s[0];
    if batch == 0 {
        return Err(dim_err!("empty batch"));
    }
    let sites: Vec<usize> = spec.sbp_sites()?.iter().map(|s| s.layer_id).collect();
    if let Some(e) = plan.per_layer.iter().find(|e| !sites.contains(&e.layer_id)) {
        return Err(config_err!("mask plan names layer {} which is not SBP-enabled", e.layer_id));
    }
    let mut h = x.as_matrix();
    let mut tape = Tape::default();
    for (id, (layer, lio)) in spec.layers.iter().zip(&io).enumerate() {
        let (mask, heads) = if layer.sbp() {
            let (m, hm) = plan_mask(plan, id, &lio.out_grid)?;
            (Some(m), hm)
        } else {
            (None, None)
        };
        let full_out = IndexMask::full(lio.out_grid.clone());
        let m = mask.as_deref().unwrap_or(&full_out);
        let (out, record) = match *layer {
            LayerSpec::Dense { bias, gelu, .. } => {
                let op = DenseOp { layer: model.linear(id, "", bias)?, gelu };
                let (y, rec) = sbp_wrap(&op, &h, m)?;
                (y, Record::Dense(op, rec))
            }
            LayerSpec::LayerNorm { .. } => {
                let op = NormOp { ln: model.norm(id, "")? };
                let (y, rec) = sbp_wrap(&op, &h, m)?;
                (y, Record::Norm(op, rec))
            }
            LayerSpec::Conv2d { stride, padding, gelu, .. } => {
                let layer = Conv2dLayer::new(model.p(id, "w")?, Some(model.p(id, "b")?), stride, padding)?;
                let (ih, iw) = (lio.in_grid.dims()[0], lio.in_grid.dims()[1]);
                let geom = layer.geometry(ih, iw)?;
                let x4 = h.reshape([batch, ih, iw, lio.in_c])?;
                let pre = conv2d_forward(&layer, &x4)?.as_matrix();
                let needed = receptive_union(&geom, m.keep());
                let rows: Vec<usize> = (0..batch).flat_map(|b| needed.iter().map(move |&p| b * ih * iw + p)).collect();
                let x_needed = gather_rows(&h, &rows)?;
                let (y, gelu_rec) = if gelu {
                    let (y, r) = sbp_wrap(&GeluOp, &pre, m)?;
                    (y, Some(r))
                } else {
                    (pre, None)
                };
                (y, Record::Conv { layer, geom, batch, needed, x_needed, gelu: gelu_rec })
            }
            LayerSpec::Block { dim, heads: nh, drop_mode, .. } => {
                let attn_layer = MhsaLayer::new(
                    nh,
                    head_dim(dim, nh),
                    model.p(id, "attn.wq")?,
                    model.p(id, "attn.wk")?,
                    model.p(id, "attn.wv")?,
                    model.p(id, "attn.wo")?,
                    drop_mode,
                )?;
                block_forward(model, id, attn_layer, &h, batch, lio.in_grid.clone(), m, layer.sbp(), heads)?
            }
            LayerSpec::MeanPool => {
                let tokens = lio.in_grid.numel();
                let mut y = Tensor::zeros([batch, lio.in_c]);
                for b in 0..batch {
                    for t in 0..tokens {
                        for (o, v) in y.row_mut(b).iter_mut().zip(h.row(b * tokens + t)) {
                            *o += v;
                        }
                    }
                }
                (y.scale(1.0 / tokens as f64), Record::Pool { batch, tokens })
            }
        };
        let cached = record.numel();
        tape.cached_elements += cached;
        tape.entries.push(TapeEntry { layer_id: id, kind: layer.kind_name(), mask, cached_elements: cached, record });
        h = out.ensure_finite("layer output")?;
    }
    tape.logits = Some(h.clone());
    Ok((h, tape))
}

/// Input grid positions read by the kept output positions of a convolution.
pub(crate) fn receptive_union(g: &ConvGeometry, keep: &[usize]) -> Vec<usize> {
    let mut flags = vec![false; g.in_h * g.in_w];
    for &o in keep {
        let (oy, ox) = (o / g.out_w, o % g.out_w);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let iy = (oy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < g.in_h);
                let ix = (ox * g.stride + kx).checked_sub(g.pad).filter(|&v| v < g.in_w);
                if let (Some(iy), Some(ix)) = (iy, ix) {
                    flags[iy * g.in_w + ix] = true;
                }
            }
        }
    }
    (0..flags.len()).filter(|&i| flags[i]).collect()
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    model: &Model,
    id: usize,
    attn_layer: MhsaLayer,
    x: &Tensor,
    batch: usize,
    grid: Shape,
    mask: &IndexMask,
    sbp: bool,
    heads: Option<HeadMask>,
) -> Result<(Tensor, Record)> {
    let tokens = grid.numel();
    let full = IndexMask::full(grid);
    let mode = attn_layer.drop_mode;
    let ln1_mask = if sbp && mode == DropMode::Qkv { mask } else { &full };
    let ln1 = NormOp { ln: model.norm(id, "ln1.")? };
    let (h1, ln1_rec) = sbp_wrap(&ln1, x, ln1_mask)?;
    let (a, cache) = mhsa_forward(&attn_layer, &h1.reshape([batch, tokens, attn_layer.channels()])?)?;
    let heads_dropped = heads.as_ref().is_some_and(|h| !h.dropped.is_empty());
    let attn = match mode {
        _ if !sbp => AttnRecord::Full(cache),
        DropMode::Head if !heads_dropped => AttnRecord::Full(cache),
        DropMode::QueryOnly | DropMode::Qkv if mask.is_full() => AttnRecord::Full(cache),
        _ => AttnRecord::Kept(restrict_cache(&cache, attn_layer.heads, mask, mode)?),
    };
    let y = x.add(&a.as_matrix())?;
    let ln2 = NormOp { ln: model.norm(id, "ln2.")? };
    let (h2, ln2_rec) = sbp_wrap(&ln2, &y, mask)?;
    let fc1 = DenseOp { layer: model.linear(id, "fc1.", true)?, gelu: true };
    let (h3, fc1_rec) = sbp_wrap(&fc1, &h2, mask)?;
    let fc2 = DenseOp { layer: model.linear(id, "fc2.", true)?, gelu: false };
    let (h4, fc2_rec) = sbp_wrap(&fc2, &h3, mask)?;
    let out = y.add(&h4)?;
    let rec = BlockRecord {
        ln1: (ln1, ln1_rec),
        attn_layer,
        attn,
        ln2: (ln2, ln2_rec),
        fc1: (fc1, fc1_rec),
        fc2: (fc2, fc2_rec),
        heads: if sbp { heads } else { None },
        batch,
        tokens,
    };
    Ok((out, Record::Block(Box::new(rec))))
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_grad(kind: LossKind, logits: &Tensor, target: &Target) -> Result<(f64, Tensor)> {
    match (kind, target) {
        (LossKind::SoftmaxXent, Target::Labels(l)) => softmax_xent_loss(logits, l),
        (LossKind::Mse, Target::Values(t)) => mse_loss(logits, t),
        (k, _) => Err(config_err!("target type does not fit loss {k:?}")),
    }
}

/// Full forward pass: exact outputs, batch-mean loss and the recorded tape.
pub fn forward(model: &Model, plan: &MaskPlan, batch: &Batch) -> Result<(f64, Tape)> {
    let (logits, mut tape) = forward_logits(model, plan, &batch.x)?;
    let (loss, dlogits) = loss_and_grad(model.spec.loss, &logits, &batch.target)?;
    tape.loss = Some(loss);
    tape.dlogits = Some(dlogits);
    Ok((loss, tape))
}

pub fn backward(tape: &Tape) -> Result<GradientStore> {
    backward_with(tape, false)
}

/// Reverse pass over the tape. With `keep_input_grads`, the gradient with
/// respect to each layer's input is stored as well.
pub fn backward_with(tape: &Tape, keep_input_grads: bool) -> Result<GradientStore> {
    let mut up = tape.dlogits.clone().ok_or_else(|| contract_err!("backward called on a tape without a completed forward pass"))?;
    let mut store = GradientStore::default();
    for entry in tape.entries.iter().rev() {
        let id = entry.layer_id;
        let mut put = |name: &str, t: Tensor| -> Result<()> {
            store.grads.insert(param_name(id, name), t.ensure_finite(name)?);
            Ok(())
        };
        let dx = match &entry.record {
            Record::Dense(op, rec) => {
                let g = row_backward(op, rec, &up)?;
                for (n, t) in g.params {
                    put(n, t)?;
                }
                g.dx
            }
            Record::Norm(op, rec) => {
                let g = row_backward(op, rec, &up)?;
                for (n, t) in g.params {
                    put(n, t)?;
                }
                g.dx
            }
            Record::Conv { layer, geom, batch, needed, x_needed, gelu } => {
                let d_pre = match (gelu, &entry.mask) {
                    (Some(rec), _) => row_backward(&GeluOp, rec, &up)?.dx,
                    (None, Some(m)) => up.zero_rows(&mask_rows(m, up.rows())?.1)?,
                    (None, None) => up.clone(),
                };
                let (ih, iw, cin) = (geom.in_h, geom.in_w, layer.c_in());
                let rows: Vec<usize> = (0..*batch).flat_map(|b| needed.iter().map(move |&p| b * ih * iw + p)).collect();
                let x = scatter_rows_add(&Tensor::zeros([batch * ih * iw, cin]), &rows, x_needed)?;
                let g = conv2d_backward_full(
                    layer,
                    &x.reshape([*batch, ih, iw, cin])?,
                    &d_pre.reshape([*batch, geom.out_h, geom.out_w, layer.c_out()])?,
                )?;
                put("w", g.dw)?;
                if let Some(db) = g.db {
                    put("b", db)?;
                }
                g.dx.as_matrix()
            }
            Record::Block(b) => {
                let mut grads = Vec::new();
                let dx = block_backward(b, entry.mask.as_deref(), &up, &mut grads)?;
                for (n, t) in grads {
                    put(&n, t)?;
                }
                dx
            }
            Record::Pool { batch, tokens } => {
                let mut dx = Tensor::zeros([batch * tokens, up.cols()]);
                let inv = 1.0 / *tokens as f64;
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for (o, v) in dx.row_mut(b * tokens + t).iter_mut().zip(up.row(b)) {
                            *o = v * inv;
                        }
                    }
                }
                dx
            }
        };
        let dx = dx.ensure_finite("input gradient")?;
        if keep_input_grads {
            store.input_grads.insert(id, dx.clone());
        }
        up = dx;
    }
    Ok(store)
}

fn block_backward(b: &BlockRecord, mask: Option<&IndexMask>, up: &Tensor, grads: &mut Vec<(String, Tensor)>) -> Result<Tensor> {
    let mut push = |prefix: &str, g: Vec<(&'static str, Tensor)>| {
        grads.extend(g.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
    };
    let g2 = row_backward(&b.fc2.0, &b.fc2.1, up)?;
    push("fc2.", g2.params);
    let g1 = row_backward(&b.fc1.0, &b.fc1.1, &g2.dx)?;
    push("fc1.", g1.params);
    let gn2 = row_backward(&b.ln2.0, &b.ln2.1, &g1.dx)?;
    push("ln2.", gn2.params);
    let dy = up.add(&gn2.dx)?;
    let c = b.attn_layer.channels();
    let dy3 = dy.reshape([b.batch, b.tokens, c])?;
    let ga = match &b.attn {
        AttnRecord::Full(cache) => mhsa_backward_full(&b.attn_layer, cache, &dy3)?,
        AttnRecord::Kept(kept) => {
            let m = mask.ok_or_else(|| contract_err!("restricted attention cache without a mask"))?;
            mhsa_backward_kept(&b.attn_layer, kept, &dy3, m, b.heads.as_ref())?
        }
    };
    push("attn.", vec![("wq", ga.dwq), ("wk", ga.dwk), ("wv", ga.dwv), ("wo", ga.dwo)]);
    let gn1 = row_backward(&b.ln1.0, &b.ln1.1, &ga.dx.as_matrix())?;
    push("ln1.", gn1.params);
    dy.add(&gn1.dx)
}

/// `θ ← θ − lr·g` for every parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &GradientStore, lr: f64) -> Result<()> {
    if let Some(k) = params.keys().find(|k| !grads.grads.contains_key(*k)) {
        return Err(contract_err!("no gradient for parameter {k}"));
    }
    for (k, p) in params.iter_mut() {
        let g = &grads.grads[k];
        if g.shape() != p.shape() {
            return Err(dim_err!("gradient for {k} is {:?}, parameter is {:?}", g.shape(), p.shape()));
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Loss with every position kept.
pub fn full_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let plan = MaskPlan::full(&model.spec)?;
    Ok(forward(model, &plan, batch)?.0)
}

/// Central differences `(L(θ + ε·e_j) − L(θ − ε·e_j)) / 2ε` for every
/// parameter component, without any gradient dropping.
pub fn finite_difference_grad(model: &Model, batch: &Batch, eps: f64) -> Result<GradientStore> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(config_err!("finite-difference step must be positive, got {eps}"));
    }
    let plan = MaskPlan::full(&model.spec)?;
    let coords: Vec<(String, usize)> = model.params.iter().flat_map(|(k, t)| (0..t.numel()).map(move |i| (k.clone(), i))).collect();
    let values: Vec<f64> = coords
        .par_iter()
        .map(|(k, i)| {
            let mut m = model.clone();
            let base = m.params[k].data()[*i];
            m.params.get_mut(k).expect("key from store").data_mut()[*i] = base + eps;
            let lp = forward(&m, &plan, batch)?.0;
            m.params.get_mut(k).expect("key from store").data_mut()[*i] = base - eps;
            let lm = forward(&m, &plan, batch)?.0;
            Ok((lp - lm) / (2.0 * eps))
        })
        .collect::<Result<_>>()?;
    let mut store = GradientStore::default();
    let mut it = values.into_iter();
    for (k, t) in &model.params {
        let data: Vec<f64> = it.by_ref().take(t.numel()).collect();
        store.grads.insert(k.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(store)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?.l2_norm();
    let scale = a.l2_norm().max(b.l2_norm());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}
