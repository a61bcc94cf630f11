//! Training-only head that fuses the feature pyramid into one stride-8 map
//! in the shared embedding space.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderVariant, FeaturePyramid, ImageEncoder, Taps};
use crate::error::{Error, Result};
use crate::nn::resample::{avg_pool2x, upsample_bilinear2x, upsample_nearest2x};
use crate::nn::{Conv2d, ParamStore};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Add the stride-8 level to the fused sum.
    pub include_c3: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { include_c3: true }
    }
}

/// 1x1 projection applied independently at every spatial position.
#[derive(Clone, Debug)]
struct Pointwise {
    weight: Tensor,
    bias: Tensor,
}

impl Pointwise {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (d, cin) = self.weight.dims2()?;
        if c != cin {
            return Err(Error::Shape(format!("projection expects {cin} channels, got {c}")));
        }
        let y = self.weight.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let y = y.broadcast_add(&self.bias.reshape((d, 1))?)?;
        Ok(y.reshape((b, d, h, w))?)
    }
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    params: ParamStore,
    proj: [Pointwise; 3],
    /// Stride-4 synthesis for the transformer variant.
    up_conv: Option<Conv2d>,
    variant: EncoderVariant,
    include_c3: bool,
    embed_dim: usize,
}

impl FusionHead {
    /// `channels` are the C2, C3, C4 widths of the pyramid the head consumes.
    pub fn new(
        channels: [usize; 3],
        embed_dim: usize,
        variant: EncoderVariant,
        cfg: &FusionConfig,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::rng_for(seed, &[stream::HEAD_INIT]);
        let mut params = ParamStore::new(dtype);
        let mut make = |level: usize, c: usize| -> Result<Pointwise> {
            Ok(Pointwise {
                weight: params.normal(&format!("fusion.proj{level}.weight"), &[embed_dim, c], (1.0 / c as f64).sqrt(), &mut r)?,
                bias: params.constant(&format!("fusion.proj{level}.bias"), &[embed_dim], 0.0)?,
            })
        };
        let proj = [make(2, channels[0])?, make(3, channels[1])?, make(4, channels[2])?];
        let up_conv = match variant {
            EncoderVariant::Conv => None,
            EncoderVariant::Vit => {
                let c = channels[1];
                let mut delta = vec![0.0; c * c * 9];
                for i in 0..c {
                    delta[(i * c + i) * 9 + 4] = 1.0;
                }
                Some(Conv2d {
                    weight: params.from_values("fusion.up.weight", &[c, c, 3, 3], delta)?,
                    bias: Some(params.constant("fusion.up.bias", &[c], 0.0)?),
                    stride: 1,
                    padding: 1,
                })
            }
        };
        Ok(Self {
            params,
            proj,
            up_conv,
            variant,
            include_c3: cfg.include_c3,
            embed_dim,
        })
    }

    /// Head matching an encoder's pyramid.
    pub fn for_encoder(encoder: &ImageEncoder, cfg: &FusionConfig, seed: u64) -> Result<Self> {
        Self::new(
            encoder.pyramid_channels(),
            encoder.config().embed_dim,
            encoder.config().variant,
            cfg,
            encoder.params().dtype(),
            seed,
        )
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Head weights never ship with the deployed encoder.
    pub fn training_only(&self) -> bool {
        true
    }

    /// Projects pyramid level `level` (2, 3 or 4) to the embedding width.
    pub fn channel_align(&self, level: usize, x: &Tensor) -> Result<Tensor> {
        match level {
            2..=4 => self.proj[level - 2].forward(x),
            _ => Err(Error::Precondition(format!("pyramid level must be 2, 3 or 4, got {level}"))),
        }
    }

    /// Synthesises strides 4, 8 and 16 from a stride-8 token map.
    pub fn vit_pyramid(&self, tokens: &Tensor) -> Result<FeaturePyramid> {
        let conv = self
            .up_conv
            .as_ref()
            .ok_or_else(|| Error::Precondition("convolutional head has no token pyramid".into()))?;
        let (_, _, h, w) = tokens.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("token grid {h}x{w} cannot be pooled to stride 16")));
        }
        Ok(FeaturePyramid {
            c2: conv.forward(&upsample_nearest2x(tokens)?)?,
            c3: tokens.clone(),
            c4: avg_pool2x(tokens)?,
        })
    }

    pub fn pyramid(&self, taps: &Taps) -> Result<FeaturePyramid> {
        match (taps, self.variant) {
            (Taps::Conv { c2, c3, c4 }, EncoderVariant::Conv) => Ok(FeaturePyramid {
                c2: c2.clone(),
                c3: c3.clone(),
                c4: c4.clone(),
            }),
            (Taps::Tokens(t), EncoderVariant::Vit) => self.vit_pyramid(t),
            _ => Err(Error::Shape("encoder taps do not match the head variant".into())),
        }
    }

    /// Brings a stride-16 (or already stride-8) map to the C3 grid.
    fn to_stride8(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) == grid {
            Ok(x.clone())
        } else if (2 * h, 2 * w) == grid {
            upsample_bilinear2x(x)
        } else {
            Err(Error::Shape(format!("C4 grid {h}x{w} incompatible with stride-8 grid {grid:?}")))
        }
    }

    /// F_out = pool(F2) + F3 + up(F4), F3 dropped when disabled.
    pub fn fuse(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        let (_, _, h3, w3) = pyr.c3.dims4()?;
        let (_, _, h2, w2) = pyr.c2.dims4()?;
        if (h2, w2) != (2 * h3, 2 * w3) {
            return Err(Error::Shape(format!("C2 grid {h2}x{w2} is not twice C3 grid {h3}x{w3}")));
        }
        let f2 = avg_pool2x(&self.channel_align(2, &pyr.c2)?)?;
        let f4 = Self::to_stride8(&self.channel_align(4, &pyr.c4)?, (h3, w3))?;
        let mut out = (f2 + f4)?;
        if self.include_c3 {
            out = (out + self.channel_align(3, &pyr.c3)?)?;
        }
        Ok(out)
    }

    pub fn forward(&self, taps: &Taps) -> Result<Tensor> {
        self.fuse(&self.pyramid(taps)?)
    }

    /// Alignment map without fusion: projected C4 brought to stride 8.
    pub fn aligned_c4(&self, taps: &Taps) -> Result<Tensor> {
        let pyr = self.pyramid(taps)?;
        let (_, _, h3, w3) = pyr.c3.dims4()?;
        Self::to_stride8(&self.channel_align(4, &pyr.c4)?, (h3, w3))
    }
}
