use candle_core::{Tensor, D};

use super::layers::Linear;
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

/// softmax(q k^T / sqrt(dh)) v over the last two dims; inputs are (.., L, dh).
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.t()?)? / dh.sqrt())?;
    let weights = crate::nn::softmax_last(&scores)?;
    Ok(weights.matmul(v)?)
}

/// Multi-head self- or cross-attention on (B, L, D) sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, out_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, out_dim, true, rng)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let o = scaled_dot_attention(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.out.forward(&o)
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }
}
