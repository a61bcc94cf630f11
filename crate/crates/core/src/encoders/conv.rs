use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{resample, Conv2d, GroupNorm, MultiHeadAttention, ParamStore};
use crate::rng::Rng;

/// Init gain for convs that feed a GroupNorm. The output is scale-invariant, so a small
/// weight norm raises the effective step size.
const NORMED_GAIN: f64 = 0.1;

/// Groups of eight channels where the width allows it.
fn norm_groups(channels: usize) -> usize {
    if channels % 8 == 0 {
        channels / 8
    } else {
        1
    }
}

/// Stride-2 downsampling conv followed by a residual 3x3 conv, each group-normalised.
#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    down_norm: GroupNorm,
    refine: Conv2d,
    refine_norm: GroupNorm,
}

impl Stage {
    fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            down: Conv2d::with_gain(store, &format!("{name}.down"), inp, out, 3, stride, 1, NORMED_GAIN, rng)?,
            down_norm: GroupNorm::new(store, &format!("{name}.down_norm"), out, norm_groups(out))?,
            refine: Conv2d::with_gain(store, &format!("{name}.refine"), out, out, 3, 1, 1, NORMED_GAIN, rng)?,
            refine_norm: GroupNorm::new(store, &format!("{name}.refine_norm"), out, norm_groups(out))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.down_norm.forward(&self.down.forward(x)?)?.relu()?;
        Ok((&h + self.refine_norm.forward(&self.refine.forward(&h)?)?)?.relu()?)
    }
}

/// CLIP-style attention pooling: the mean token queries all spatial tokens.
#[derive(Clone, Debug)]
pub(crate) struct AttentionPool {
    pos: Tensor,
    attn: MultiHeadAttention,
}

impl AttentionPool {
    fn new(store: &mut ParamStore, tokens: usize, dim: usize, out: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            pos: store.normal("pool.pos", &[tokens + 1, dim], 1.0 / (dim as f64).sqrt(), rng)?,
            attn: MultiHeadAttention::new(store, "pool.attn", dim, out, heads, rng)?,
        })
    }

    /// (B,C,h,w) -> (B,out)
    fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = map.dims4()?;
        let tokens = map.reshape((b, c, h * w))?.transpose(1, 2)?;
        let mean = tokens.mean_keepdim(1)?;
        let seq = Tensor::cat(&[&mean, &tokens], 1)?.broadcast_add(&self.pos)?;
        let query = seq.narrow(1, 0, 1)?;
        Ok(self.attn.forward(&query, &seq)?.squeeze(1)?)
    }

    /// Per-cell value and output projections, giving a dense map in the pooled space.
    fn dense(&self, map: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = map.dims4()?;
        let tokens = map
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .broadcast_add(&self.pos.narrow(0, 1, h * w)?)?;
        let cells = self.attn.out.forward(&self.attn.v.forward(&tokens)?)?;
        let d = cells.dim(2)?;
        Ok(cells.transpose(1, 2)?.reshape((b, d, h, w))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvNet {
    stem: Conv2d,
    stages: [Stage; 3],
    pool: AttentionPool,
    last_stride: usize,
}

pub(crate) struct ConvTaps {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub global: Tensor,
}

impl ConvNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        channels: [usize; 4],
        embed_dim: usize,
        heads: usize,
        last_stride: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let stem = Conv2d::new(store, "stem", 3, channels[0], 3, 2, 1, rng)?;
        let stages = [
            Stage::new(store, "stage2", channels[0], channels[1], 2, rng)?,
            Stage::new(store, "stage3", channels[1], channels[2], 2, rng)?,
            Stage::new(store, "stage4", channels[2], channels[3], last_stride, rng)?,
        ];
        let c4_stride = 8 * last_stride;
        let tokens = (height / c4_stride) * (width / c4_stride);
        let pool = AttentionPool::new(store, tokens, channels[3], embed_dim, heads, rng)?;
        Ok(Self {
            stem,
            stages,
            pool,
            last_stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ConvTaps> {
        let x = self.stem.forward(x)?.relu()?;
        let c2 = self.stages[0].forward(&x)?;
        let c3 = self.stages[1].forward(&c2)?;
        let c4 = self.stages[2].forward(&c3)?;
        let global = self.pool.forward(&c4)?;
        Ok(ConvTaps { c2, c3, c4, global })
    }

    /// Dense stride-8 embedding derived from C4 through the pooling projections.
    pub fn dense(&self, c4: &Tensor) -> Result<Tensor> {
        let cells = self.pool.dense(c4)?;
        if self.last_stride == 2 {
            resample::upsample_bilinear2x(&cells)
        } else {
            Ok(cells)
        }
    }
}

