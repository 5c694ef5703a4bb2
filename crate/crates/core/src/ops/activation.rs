//! GELU, tanh approximation.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_forward(x: &Tensor) -> Tensor {
    x.map(gelu)
}

/// `upstream ⊙ gelu'(x)`, `x` being the pre-activation.
pub fn gelu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.numel() != upstream.numel() {
        return Err(dim_err!("gelu input has {} elements, upstream {}", x.numel(), upstream.numel()));
    }
    let data = x.data().iter().zip(upstream.data()).map(|(&a, &g)| g * gelu_grad(a)).collect();
    Tensor::new(upstream.shape().to_vec(), data)
}
