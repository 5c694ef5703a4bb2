//! Linear / point-wise convolution layer. Tokens are rows, channels columns.

use crate::error::{dim_err, Result};
use crate::sampling::IndexMask;
use crate::tensor::{gather_rows, matmul, matmul_nt, matmul_tn, scatter_rows_add, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `C_in × C_out`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dw: Tensor,
    pub db: Option<Tensor>,
    pub dx: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(dim_err!("linear weight must be 2-D, got {:?}", weight.shape()));
        }
        if let Some(b) = &bias {
            if b.numel() != weight.cols() {
                return Err(dim_err!("bias length {} != C_out {}", b.numel(), weight.cols()));
            }
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn c_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.cols()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.c_in() {
            return Err(dim_err!("linear input has {} channels, layer expects {}", x.cols(), self.c_in()));
        }
        Ok(())
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    layer.check_input(x)?;
    let y = matmul(&x.as_matrix(), &layer.weight)?;
    match &layer.bias {
        Some(b) => y.add_row_broadcast(b),
        None => Ok(y),
    }
}

/// `dW = xᵀ·dY`, `dX = dY·Wᵀ`, `db = Σ_rows dY`.
pub fn linear_backward_full(layer: &LinearLayer, x: &Tensor, upstream: &Tensor) -> Result<LinearGrads> {
    layer.check_input(x)?;
    if upstream.rows() != x.rows() || upstream.cols() != layer.c_out() {
        return Err(dim_err!("upstream is {}×{}, expected {}×{}", upstream.rows(), upstream.cols(), x.rows(), layer.c_out()));
    }
    let dw = matmul_tn(&x.as_matrix(), &upstream.as_matrix())?;
    let dx = matmul_nt(&upstream.as_matrix(), &layer.weight)?;
    let db = layer.bias.as_ref().map(|_| upstream.col_sum());
    Ok(LinearGrads { dw, db, dx })
}

/// Backward from kept rows only: `x_keep` and `upstream_keep` hold rows
/// `keep_rows` (ascending) of an `n_rows`-row activation. Dropped rows of the
/// returned `dx` are zero.
pub fn linear_backward_kept(layer: &LinearLayer, x_keep: &Tensor, upstream_keep: &Tensor, keep_rows: &[usize], n_rows: usize) -> Result<LinearGrads> {
    let kept = linear_backward_full(layer, x_keep, upstream_keep)?;
    let dx = scatter_rows_add(&Tensor::zeros([n_rows, layer.c_in()]), keep_rows, &kept.dx)?;
    Ok(LinearGrads { dw: kept.dw, db: kept.db, dx })
}

/// Row indices of an `n`-row activation whose token axis is `mask`'s grid,
/// tiled over the batch.
pub(crate) fn mask_rows(mask: &IndexMask, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let tokens = mask.total();
    if tokens == 0 || !n.is_multiple_of(tokens) {
        return Err(dim_err!("mask over {tokens} positions does not tile {n} rows"));
    }
    Ok(mask.batch_rows(n / tokens))
}

/// Stochastic backward: reads only the kept rows of `x` and `upstream`.
/// Equivalent to [`linear_backward_full`] with dropped upstream rows zeroed.
pub fn linear_backward_sbp(layer: &LinearLayer, x: &Tensor, upstream: &Tensor, mask: &IndexMask) -> Result<LinearGrads> {
    layer.check_input(x)?;
    let (keep, _) = mask_rows(mask, x.rows())?;
    if mask.is_full() {
        return linear_backward_full(layer, x, upstream);
    }
    if upstream.rows() != x.rows() {
        return Err(dim_err!("upstream has {} rows, input has {}", upstream.rows(), x.rows()));
    }
    let x_keep = gather_rows(&x.as_matrix(), &keep)?;
    let up_keep = gather_rows(&upstream.as_matrix(), &keep)?;
    linear_backward_kept(layer, &x_keep, &up_keep, &keep, x.rows())
}
