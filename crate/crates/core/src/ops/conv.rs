//! 2-D convolution (cross-correlation) over `B×H×W×C` activations.

use crate::error::{config_err, dim_err, Result};
use crate::sampling::IndexMask;
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `k × k × C_in × C_out`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(len: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = len + 2 * p;
    if padded < k || !(padded - k).is_multiple_of(s) {
        return Err(config_err!("extent {len} with kernel {k}, stride {s}, padding {p} gives a non-integer output size"));
    }
    Ok((padded - k) / s + 1)
}

impl ConvGeometry {
    pub fn new(k: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(config_err!("kernel and stride must be at least 1"));
        }
        let out_h = out_extent(in_h, k, stride, pad)?;
        let out_w = out_extent(in_w, k, stride, pad)?;
        Ok(ConvGeometry { k, stride, pad, in_h, in_w, out_h, out_w })
    }

    /// Input coordinate read by output `o` at kernel offset `kk`, if inside the image.
    fn input_at(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        (o * self.stride + kk).checked_sub(self.pad).filter(|&i| i < len)
    }

    /// Output positions whose receptive field contains input `(iy, ix)`.
    pub fn contributors(&self, iy: usize, ix: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let hit_y = (iy + self.pad).checked_sub(oy * self.stride).is_some_and(|d| d < self.k);
                let hit_x = (ix + self.pad).checked_sub(ox * self.stride).is_some_and(|d| d < self.k);
                if hit_y && hit_x {
                    out.push((oy, ox));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub dw: Tensor,
    pub db: Option<Tensor>,
    pub dx: Tensor,
}

impl Conv2dLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[0] != s[1] || s[0] == 0 {
            return Err(dim_err!("conv weight must be k×k×C_in×C_out, got {s:?}"));
        }
        if stride == 0 {
            return Err(config_err!("conv stride must be at least 1"));
        }
        if let Some(b) = &bias {
            if b.numel() != s[3] {
                return Err(dim_err!("conv bias length {} != C_out {}", b.numel(), s[3]));
            }
        }
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.kernel(), self.stride, self.padding, in_h, in_w)
    }

    fn w(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        let (k, cin, cout) = (self.kernel(), self.c_in(), self.c_out());
        self.weight.data()[((ky * k + kx) * cin + ci) * cout + co]
    }

    fn input_dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.c_in() {
            return Err(dim_err!("conv input must be B×H×W×{}, got {s:?}", self.c_in()));
        }
        Ok((s[0], s[1], s[2]))
    }
}

pub fn conv2d_forward(layer: &Conv2dLayer, x: &Tensor) -> Result<Tensor> {
    let (b, h, w) = layer.input_dims(x)?;
    let g = layer.geometry(h, w)?;
    let (cin, cout, k) = (layer.c_in(), layer.c_out(), g.k);
    let per_in = h * w * cin;
    let per_out = g.out_h * g.out_w * cout;
    let samples: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xs = &x.data()[bi * per_in..(bi + 1) * per_in];
            let mut out = vec![0.0; per_out];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let o = &mut out[(oy * g.out_w + ox) * cout..(oy * g.out_w + ox + 1) * cout];
                    if let Some(bias) = &layer.bias {
                        o.copy_from_slice(bias.data());
                    }
                    for ky in 0..k {
                        let Some(iy) = g.input_at(oy, ky, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = g.input_at(ox, kx, w) else { continue };
                            for ci in 0..cin {
                                let xv = xs[(iy * w + ix) * cin + ci];
                                for (co, ov) in o.iter_mut().enumerate() {
                                    *ov += xv * layer.w(ky, kx, ci, co);
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Tensor::new([b, g.out_h, g.out_w, cout], samples.concat())?.ensure_finite("conv2d_forward")
}

/// Full backward. The input gradient is the full correlation of the
/// zero-interleaved (by stride), zero-padded upstream with the kernel rotated
/// by 180° and transposed in channels; the weight gradient correlates the
/// input with the upstream.
pub fn conv2d_backward_full(layer: &Conv2dLayer, x: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let (b, h, w) = layer.input_dims(x)?;
    let g = layer.geometry(h, w)?;
    let (cin, cout, k, s) = (layer.c_in(), layer.c_out(), g.k, g.stride);
    if upstream.shape() != [b, g.out_h, g.out_w, cout] {
        return Err(dim_err!("conv upstream must be {:?}, got {:?}", [b, g.out_h, g.out_w, cout], upstream.shape()));
    }
    let per_in = h * w * cin;
    let per_out = g.out_h * g.out_w * cout;
    // extent of the zero-interleaved upstream
    let (dil_h, dil_w) = ((g.out_h - 1) * s + 1, (g.out_w - 1) * s + 1);
    let lead = k as isize - 1 - g.pad as isize;
    let dilated =
        |u: isize, len: usize| -> Option<usize> { (u >= 0 && (u as usize) < len && (u as usize).is_multiple_of(s)).then(|| u as usize / s) };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xs = &x.data()[bi * per_in..(bi + 1) * per_in];
            let ds = &upstream.data()[bi * per_out..(bi + 1) * per_out];
            let mut dx = vec![0.0; per_in];
            for iy in 0..h {
                for ix in 0..w {
                    let cell = &mut dx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    for ry in 0..k {
                        let Some(oy) = dilated(iy as isize + ry as isize - lead, dil_h) else { continue };
                        for rx in 0..k {
                            let Some(ox) = dilated(ix as isize + rx as isize - lead, dil_w) else { continue };
                            let up = &ds[(oy * g.out_w + ox) * cout..(oy * g.out_w + ox + 1) * cout];
                            // rotated kernel tap
                            let (ky, kx) = (k - 1 - ry, k - 1 - rx);
                            for (ci, c) in cell.iter_mut().enumerate() {
                                for (co, &u) in up.iter().enumerate() {
                                    *c += u * layer.w(ky, kx, ci, co);
                                }
                            }
                        }
                    }
                }
            }
            let mut dw = vec![0.0; k * k * cin * cout];
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..g.out_h {
                        let Some(iy) = g.input_at(oy, ky, h) else { continue };
                        for ox in 0..g.out_w {
                            let Some(ix) = g.input_at(ox, kx, w) else { continue };
                            let up = &ds[(oy * g.out_w + ox) * cout..(oy * g.out_w + ox + 1) * cout];
                            for ci in 0..cin {
                                let xv = xs[(iy * w + ix) * cin + ci];
                                let base = ((ky * k + kx) * cin + ci) * cout;
                                for (co, &u) in up.iter().enumerate() {
                                    dw[base + co] += xv * u;
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0; k * k * cin * cout];
    let mut dx = Vec::with_capacity(b * per_in);
    for (pdx, pdw) in partials {
        dx.extend(pdx);
        for (a, v) in dw.iter_mut().zip(pdw) {
            *a += v;
        }
    }
    let db = layer.bias.as_ref().map(|_| upstream.as_matrix().col_sum());
    Ok(ConvGrads {
        dw: Tensor::new([k, k, cin, cout], dw)?.ensure_finite("conv2d dW")?,
        db,
        dx: Tensor::new([b, h, w, cin], dx)?.ensure_finite("conv2d dX")?,
    })
}

/// Zeroes the upstream at dropped output positions (for every sample).
pub fn zero_dropped_positions(upstream: &Tensor, mask: &IndexMask) -> Result<Tensor> {
    let s = upstream.shape();
    if s.len() != 4 || mask.shape().dims() != [s[1], s[2]] {
        return Err(dim_err!("mask grid {} does not match conv output grid {:?}", mask.shape(), &s[1..s.len().min(3)]));
    }
    let (_, drop) = mask.batch_rows(s[0]);
    upstream.as_matrix().zero_rows(&drop)?.reshape(s.to_vec())
}

/// Stochastic backward with the mask on the output grid: identical to the full
/// backward of an upstream whose dropped positions are zero.
pub fn conv2d_backward_sbp(layer: &Conv2dLayer, x: &Tensor, upstream: &Tensor, mask: &IndexMask) -> Result<ConvGrads> {
    let masked = zero_dropped_positions(upstream, mask)?;
    conv2d_backward_full(layer, x, &masked)
}
