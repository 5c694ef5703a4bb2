//! Batch-mean losses returning the loss and its gradient w.r.t. the predictions.

use crate::error::{dim_err, Error, Result};
use crate::ops::attention::softmax_rows;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxXent,
    Mse,
}

/// `mean_b −log softmax(logits_b)[label_b]`, gradient `(p − onehot)/B`.
pub fn softmax_xent_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(dim_err!("{} labels for {b} rows of logits", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    let m = logits.as_matrix();
    let mut grad = softmax_rows(&m).scale(1.0 / b as f64);
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let r = m.row(i);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - r[l];
        grad.row_mut(i)[l] -= 1.0 / b as f64;
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// `mean_b Σ_j (pred − target)²`, gradient `2(pred − target)/B`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.numel() != target.numel() || pred.rows() != target.rows() {
        return Err(dim_err!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let b = pred.rows() as f64;
    let diff = pred.as_matrix().sub(&target.as_matrix())?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("squared-error loss".into()));
    }
    Ok((loss, diff.scale(2.0 / b)))
}

/// Index of the largest entry in each row.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .map(|i| x.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best }).0)
        .collect()
}
