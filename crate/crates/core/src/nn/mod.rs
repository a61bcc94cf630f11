//! Small neural-network toolkit on top of candle tensors.

mod attention;
mod layers;
mod params;
pub mod resample;

use candle_core::{Tensor, D};

pub use attention::{scaled_dot_attention, MultiHeadAttention};
pub use layers::{l2_normalize, Conv2d, GroupNorm, LayerNorm, Linear};
pub use params::ParamStore;

use crate::error::Result;

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
