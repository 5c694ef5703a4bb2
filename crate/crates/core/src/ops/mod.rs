//! Operator forward rules with full and stochastic backward rules.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;

pub use activation::{gelu, gelu_backward, gelu_forward, gelu_grad};
pub use attention::{
    mhsa_backward_full, mhsa_backward_kept, mhsa_backward_sbp, mhsa_forward, restrict_cache, DropMode, MhsaCache, MhsaGrads, MhsaKept, MhsaLayer,
};
pub use conv::{conv2d_backward_full, conv2d_backward_sbp, conv2d_forward, zero_dropped_positions, Conv2dLayer, ConvGeometry, ConvGrads};
pub use linear::{linear_backward_full, linear_backward_kept, linear_backward_sbp, linear_forward, LinearGrads, LinearLayer};
pub use loss::{argmax_rows, mse_loss, softmax_xent_loss, LossKind};
pub use norm::{layer_norm_backward, layer_norm_forward, LayerNorm, NormCache, NormGrads, LN_EPS};
