//! Network descriptions, shape tracing, presets and parameter initialization.

use crate::error::{config_err, dim_err, Result};
use crate::ops::{DropMode, LossKind};
use crate::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ParamStore = BTreeMap<String, Tensor>;

/// One layer. Token/spatial positions are rows, channels are columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Per-position linear map (point-wise convolution), optionally followed by GELU.
    Dense {
        c_in: usize,
        c_out: usize,
        bias: bool,
        gelu: bool,
        sbp: bool,
    },
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        c_in: usize,
        c_out: usize,
        gelu: bool,
        sbp: bool,
    },
    LayerNorm {
        dim: usize,
        sbp: bool,
    },
    /// Pre-norm transformer block: `x + MHSA(LN(x))`, then `y + MLP(LN(y))`.
    Block {
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        sbp: bool,
        drop_mode: DropMode,
    },
    /// Averages over all positions, leaving one row per sample.
    MeanPool,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Block { .. } => "block",
            LayerSpec::MeanPool => "mean_pool",
        }
    }

    pub fn sbp(&self) -> bool {
        match *self {
            LayerSpec::Dense { sbp, .. } | LayerSpec::Conv2d { sbp, .. } | LayerSpec::LayerNorm { sbp, .. } | LayerSpec::Block { sbp, .. } => sbp,
            LayerSpec::MeanPool => false,
        }
    }

    pub fn set_sbp(&mut self, on: bool) {
        match self {
            LayerSpec::Dense { sbp, .. } | LayerSpec::Conv2d { sbp, .. } | LayerSpec::LayerNorm { sbp, .. } | LayerSpec::Block { sbp, .. } => {
                *sbp = on
            }
            LayerSpec::MeanPool => {}
        }
    }

    /// Parameter names (without the layer prefix) and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = |n: &str, s: &[usize]| (n.to_string(), s.to_vec());
        match *self {
            LayerSpec::Dense { c_in, c_out, bias, .. } => {
                let mut v = vec![p("w", &[c_in, c_out])];
                if bias {
                    v.push(p("b", &[c_out]));
                }
                v
            }
            LayerSpec::Conv2d { kernel, c_in, c_out, .. } => vec![p("w", &[kernel, kernel, c_in, c_out]), p("b", &[c_out])],
            LayerSpec::LayerNorm { dim, .. } => vec![p("gamma", &[dim]), p("beta", &[dim])],
            LayerSpec::Block { dim, heads, mlp_hidden, .. } => {
                let hd = head_dim(dim, heads) * heads;
                vec![
                    p("ln1.gamma", &[dim]),
                    p("ln1.beta", &[dim]),
                    p("attn.wq", &[dim, hd]),
                    p("attn.wk", &[dim, hd]),
                    p("attn.wv", &[dim, hd]),
                    p("attn.wo", &[hd, dim]),
                    p("ln2.gamma", &[dim]),
                    p("ln2.beta", &[dim]),
                    p("fc1.w", &[dim, mlp_hidden]),
                    p("fc1.b", &[mlp_hidden]),
                    p("fc2.w", &[mlp_hidden, dim]),
                    p("fc2.b", &[dim]),
                ]
            }
            LayerSpec::MeanPool => vec![],
        }
    }
}

/// Per-head width: `dim / heads`.
pub fn head_dim(dim: usize, heads: usize) -> usize {
    dim / heads.max(1)
}

pub fn param_name(layer_id: usize, name: &str) -> String {
    format!("{layer_id:02}.{name}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Token/spatial grid of one input sample.
    pub input_grid: Shape,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

/// Input and output geometry of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIo {
    pub in_grid: Shape,
    pub in_c: usize,
    pub out_grid: Shape,
    pub out_c: usize,
}

/// A layer that takes a gradient mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SbpSite {
    pub layer_id: usize,
    /// Grid the mask lives on: the layer's output grid.
    pub grid: Shape,
    pub heads: Option<usize>,
}

impl NetworkSpec {
    /// Checks that adjacent layers compose and returns each layer's geometry.
    pub fn trace(&self) -> Result<Vec<LayerIo>> {
        if self.in_channels == 0 {
            return Err(config_err!("input needs at least one channel"));
        }
        if !self.layers.iter().any(|l| !l.param_shapes().is_empty()) {
            return Err(config_err!("network has no parameterized layer"));
        }
        let mut grid = self.input_grid.clone();
        let mut c = self.in_channels;
        let mut out = Vec::with_capacity(self.layers.len());
        for (id, layer) in self.layers.iter().enumerate() {
            let expect = |want: usize| {
                if want != c {
                    Err(dim_err!("layer {id} ({}) expects {want} channels, receives {c}", layer.kind_name()))
                } else {
                    Ok(())
                }
            };
            let (next_grid, next_c) = match *layer {
                LayerSpec::Dense { c_in, c_out, .. } => {
                    expect(c_in)?;
                    if c_out == 0 {
                        return Err(config_err!("layer {id}: dense layer needs c_out ≥ 1"));
                    }
                    (grid.clone(), c_out)
                }
                LayerSpec::Conv2d { kernel, stride, padding, c_in, c_out, .. } => {
                    expect(c_in)?;
                    if grid.ndim() != 2 {
                        return Err(config_err!("layer {id}: conv2d needs a 2-D grid, got {grid}"));
                    }
                    if c_out == 0 {
                        return Err(config_err!("layer {id}: conv2d needs c_out ≥ 1"));
                    }
                    let g = crate::ops::ConvGeometry::new(kernel, stride, padding, grid.dims()[0], grid.dims()[1])
                        .map_err(|e| config_err!("layer {id}: {e}"))?;
                    (Shape::new(vec![g.out_h, g.out_w])?, c_out)
                }
                LayerSpec::LayerNorm { dim, .. } => {
                    expect(dim)?;
                    (grid.clone(), dim)
                }
                LayerSpec::Block { dim, heads, mlp_hidden, .. } => {
                    expect(dim)?;
                    if heads == 0 || dim % heads != 0 {
                        return Err(config_err!("layer {id}: {heads} heads do not divide width {dim}"));
                    }
                    if mlp_hidden == 0 {
                        return Err(config_err!("layer {id}: block needs mlp_hidden ≥ 1"));
                    }
                    (grid.clone(), dim)
                }
                LayerSpec::MeanPool => (Shape::new(vec![1])?, c),
            };
            out.push(LayerIo { in_grid: grid, in_c: c, out_grid: next_grid.clone(), out_c: next_c });
            grid = next_grid;
            c = next_c;
        }
        if grid.numel() != 1 {
            return Err(config_err!("network output must be one row per sample, final grid is {grid}"));
        }
        Ok(out)
    }

    pub fn output_channels(&self) -> Result<usize> {
        Ok(self.trace()?.last().map_or(self.in_channels, |io| io.out_c))
    }

    pub fn sbp_sites(&self) -> Result<Vec<SbpSite>> {
        let io = self.trace()?;
        Ok(self
            .layers
            .iter()
            .zip(io)
            .enumerate()
            .filter(|(_, (l, _))| l.sbp())
            .map(|(layer_id, (l, io))| SbpSite {
                layer_id,
                grid: io.out_grid,
                heads: match *l {
                    LayerSpec::Block { heads, .. } => Some(heads),
                    _ => None,
                },
            })
            .collect())
    }

    /// All parameter names and shapes, in store order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.layers.iter().enumerate().flat_map(|(id, l)| l.param_shapes().into_iter().map(move |(n, s)| (param_name(id, &n), s))).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Layers eligible for SBP in presets: the transformer blocks if there
    /// are any, otherwise every parameterized layer but the classifier head.
    fn sbp_candidates(&self) -> Vec<usize> {
        let blocks: Vec<usize> = (0..self.layers.len()).filter(|&i| matches!(self.layers[i], LayerSpec::Block { .. })).collect();
        if !blocks.is_empty() {
            return blocks;
        }
        let last_param = self.layers.iter().rposition(|l| !l.param_shapes().is_empty());
        (0..self.layers.len())
            .filter(|&i| Some(i) != last_param && !matches!(self.layers[i], LayerSpec::MeanPool | LayerSpec::LayerNorm { .. }))
            .collect()
    }

    /// Enables SBP on the last `⌈fraction · candidates⌉` candidate layers and
    /// disables it elsewhere.
    pub fn with_sbp_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(config_err!("SBP layer fraction must lie in [0, 1], got {fraction}"));
        }
        let cand = self.sbp_candidates();
        let on = (fraction * cand.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        for l in &mut self.layers {
            l.set_sbp(false);
        }
        for &i in &cand[cand.len() - on..] {
            self.layers[i].set_sbp(true);
        }
        Ok(self)
    }

    /// Fresh parameters: zero-mean normal weights with variance `1/fan_in`,
    /// zero biases, unit norm gains.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (id, layer) in self.layers.iter().enumerate() {
            for (name, shape) in layer.param_shapes() {
                let numel: usize = shape.iter().product();
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                let t = match leaf {
                    "gamma" => Tensor::filled(shape, 1.0),
                    "beta" | "b" => Tensor::zeros(shape),
                    _ => {
                        let fan_in: usize = shape[..shape.len() - 1].iter().product();
                        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).map_err(|e| config_err!("weight init: {e}"))?;
                        Tensor::new(shape, (0..numel).map(|_| normal.sample(&mut rng)).collect())?
                    }
                };
                store.insert(param_name(id, &name), t);
            }
        }
        Ok(store)
    }

    /// Verifies that a parameter store has exactly this network's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let want = self.param_shapes();
        if want.len() != params.len() || want.keys().zip(params.keys()).any(|(a, b)| a != b) {
            return Err(crate::error::contract_err!("parameter names do not match the network"));
        }
        for (name, shape) in &want {
            if params[name].shape() != shape.as_slice() {
                return Err(dim_err!("parameter {name} is {:?}, expected {shape:?}", params[name].shape()));
            }
        }
        Ok(())
    }
}

/// Point-wise MLP over a token grid: hidden GELU layers, mean pooling, linear head.
pub fn tiny_mlp(grid: Shape, in_channels: usize, hidden: usize, depth: usize, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for _ in 0..depth {
        layers.push(LayerSpec::Dense { c_in: c, c_out: hidden, bias: true, gelu: true, sbp: false });
        c = hidden;
    }
    layers.push(LayerSpec::MeanPool);
    layers.push(LayerSpec::Dense { c_in: c, c_out: classes, bias: true, gelu: false, sbp: false });
    NetworkSpec { input_grid: grid, in_channels, layers, loss: LossKind::SoftmaxXent }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitShape {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
}

impl VitShape {
    /// 6 blocks, width 32, 2 heads of 16.
    pub const TINY: VitShape = VitShape { dim: 32, heads: 2, blocks: 6, mlp_hidden: 64 };
    /// 12 blocks, width 192, 3 heads of 64.
    pub const VIT_TINY: VitShape = VitShape { dim: 192, heads: 3, blocks: 12, mlp_hidden: 768 };
}

/// Patch embedding, transformer blocks, final norm, mean pooling, linear head.
pub fn tiny_vit(grid: Shape, in_channels: usize, shape: VitShape, classes: usize, drop_mode: DropMode) -> NetworkSpec {
    let mut layers = vec![LayerSpec::Dense { c_in: in_channels, c_out: shape.dim, bias: true, gelu: false, sbp: false }];
    for _ in 0..shape.blocks {
        layers.push(LayerSpec::Block { dim: shape.dim, heads: shape.heads, mlp_hidden: shape.mlp_hidden, sbp: false, drop_mode });
    }
    layers.push(LayerSpec::LayerNorm { dim: shape.dim, sbp: false });
    layers.push(LayerSpec::MeanPool);
    layers.push(LayerSpec::Dense { c_in: shape.dim, c_out: classes, bias: true, gelu: false, sbp: false });
    NetworkSpec { input_grid: grid, in_channels, layers, loss: LossKind::SoftmaxXent }
}

/// 3×3 conv, 2×2 stride-2 downsampling conv, point-wise layer, pooling, head.
pub fn tiny_conv(grid: Shape, in_channels: usize, width: usize, classes: usize) -> NetworkSpec {
    let layers = vec![
        LayerSpec::Conv2d { kernel: 3, stride: 1, padding: 1, c_in: in_channels, c_out: width, gelu: true, sbp: false },
        LayerSpec::Conv2d { kernel: 2, stride: 2, padding: 0, c_in: width, c_out: 2 * width, gelu: true, sbp: false },
        LayerSpec::Dense { c_in: 2 * width, c_out: 2 * width, bias: true, gelu: true, sbp: false },
        LayerSpec::MeanPool,
        LayerSpec::Dense { c_in: 2 * width, c_out: classes, bias: true, gelu: false, sbp: false },
    ];
    NetworkSpec { input_grid: grid, in_channels, layers, loss: LossKind::SoftmaxXent }
}
