use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 2 * dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * dim, dim, true, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.relu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Plain vision transformer with stride-8 patches and a class token.
#[derive(Clone, Debug)]
pub(crate) struct VitNet {
    patch: Conv2d,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Linear,
}

pub(crate) struct VitTaps {
    /// (B, D, H/8, W/8)
    pub tokens: Tensor,
    pub global: Tensor,
}

impl VitNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        embed_dim: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let tokens = (height / patch) * (width / patch);
        let patch_conv = Conv2d::new(store, "patch", 3, dim, patch, patch, 0, rng)?;
        let cls = store.normal("cls", &[1, 1, dim], 0.02, rng)?;
        let pos = store.normal("pos", &[tokens + 1, dim], 0.02, rng)?;
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("block{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: patch_conv,
            cls,
            pos,
            blocks,
            ln_final: LayerNorm::new(store, "ln_final", dim)?,
            proj: Linear::new(store, "proj", dim, embed_dim, false, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<VitTaps> {
        let grid = self.patch.forward(x)?;
        let (b, d, h, w) = grid.dims4()?;
        let tokens = grid.reshape((b, d, h * w))?.transpose(1, 2)?;
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let mut seq = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            seq = block.forward(&seq)?;
        }
        let seq = self.ln_final.forward(&seq)?;
        let global = self.proj.forward(&seq.narrow(1, 0, 1)?.squeeze(1)?)?;
        let tokens = seq
            .narrow(1, 1, h * w)?
            .transpose(1, 2)?
            .reshape((b, d, h, w))?;
        Ok(VitTaps { tokens, global })
    }

    /// Dense stride-8 embedding: the class-token projection applied per token.
    pub fn dense(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = tokens.dims4()?;
        let cells = self
            .proj
            .forward(&tokens.reshape((b, d, h * w))?.transpose(1, 2)?)?;
        let e = cells.dim(2)?;
        Ok(cells.transpose(1, 2)?.reshape((b, e, h, w))?)
    }
}
