//! Image encoders (convolutional and transformer) exposing multi-stage
//! feature taps, plus the frozen prompt encoder.

mod conv;
mod text;
mod vit;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng;

pub use text::{TextEmbedding, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Conv,
    Vit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Stem, C2, C3 and C4 widths of the convolutional variant.
    pub channels: [usize; 4],
    /// Shared image-text embedding size.
    pub embed_dim: usize,
    pub pool_heads: usize,
    /// Stride of the last conv stage (2 keeps C4 at stride 16).
    pub last_stride: usize,
    pub patch_size: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub text_dim: usize,
    pub text_max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Conv,
            channels: [16, 32, 48, 64],
            embed_dim: 64,
            pool_heads: 4,
            last_stride: 2,
            patch_size: 8,
            vit_dim: 64,
            vit_depth: 2,
            vit_heads: 4,
            text_dim: 64,
            text_max_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != 8 {
            return Err(Error::Config("vit patch stride must be 8".into()));
        }
        if !matches!(self.last_stride, 1 | 2) {
            return Err(Error::Config("last_stride must be 1 or 2".into()));
        }
        if self.channels.iter().any(|&c| c == 0) || self.embed_dim == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.channels[3] % self.pool_heads != 0 || self.vit_dim % self.vit_heads != 0 {
            return Err(Error::Config("attention heads must divide their width".into()));
        }
        Ok(())
    }

    /// Same architecture at half the channel widths.
    pub fn half_width(&self) -> Self {
        let mut c = self.clone();
        c.channels = self.channels.map(|v| (v / 2).max(1));
        c
    }

    /// Stride of the C4 tap.
    pub fn c4_stride(&self) -> usize {
        8 * self.last_stride
    }
}

/// Raw per-stage outputs of an encoder forward pass.
#[derive(Clone, Debug)]
pub enum Taps {
    /// C2, C3, C4 at strides 4, 8 and 16.
    Conv { c2: Tensor, c3: Tensor, c4: Tensor },
    /// Final token map of the transformer, at stride 8.
    Tokens(Tensor),
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub taps: Taps,
    /// (B, d) image embedding.
    pub global: Tensor,
}

/// Multi-stage feature maps aligned to strides 4, 8 and 16.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
}

#[derive(Clone, Debug)]
enum Arch {
    Conv(conv::ConvNet),
    Vit(vit::VitNet),
}

/// Image encoder; every parameter lies on the deployed image-to-embedding path.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    height: usize,
    width: usize,
    params: ParamStore,
    arch: Arch,
}

impl ImageEncoder {
    /// `init_stream` separates teacher and student initialisations.
    pub fn new(cfg: &EncoderConfig, height: usize, width: usize, dtype: DType, seed: u64, init_stream: u64) -> Result<Self> {
        cfg.validate()?;
        if height % 16 != 0 || width % 16 != 0 {
            return Err(Error::Config(format!("input {height}x{width} not divisible by 16")));
        }
        let mut r = rng::rng_for(seed, &[init_stream]);
        let mut params = ParamStore::new(dtype);
        let arch = match cfg.variant {
            EncoderVariant::Conv => Arch::Conv(conv::ConvNet::new(
                &mut params,
                cfg.channels,
                cfg.embed_dim,
                cfg.pool_heads,
                cfg.last_stride,
                height,
                width,
                &mut r,
            )?),
            EncoderVariant::Vit => Arch::Vit(vit::VitNet::new(
                &mut params,
                cfg.patch_size,
                cfg.vit_dim,
                cfg.vit_depth,
                cfg.vit_heads,
                cfg.embed_dim,
                height,
                width,
                &mut r,
            )?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            height,
            width,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Channel count of each pyramid level once synthesised: (C2, C3, C4).
    pub fn pyramid_channels(&self) -> [usize; 3] {
        match self.cfg.variant {
            EncoderVariant::Conv => [self.cfg.channels[1], self.cfg.channels[2], self.cfg.channels[3]],
            EncoderVariant::Vit => [self.cfg.vit_dim; 3],
        }
    }

    /// Parameters on the image-to-global-embedding path.
    pub fn deployed_param_count(&self) -> usize {
        self.params.num_params()
    }

    /// `images` is (B, 3, H, W) with values in [0, 1].
    pub fn forward(&self, images: &Tensor) -> Result<EncoderOutput> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.height || w != self.width {
            return Err(Error::Shape(format!(
                "image batch is {c}x{h}x{w}, encoder expects 3x{}x{}",
                self.height, self.width
            )));
        }
        let x = ((images.to_dtype(self.params.dtype())? - 0.5)? * 4.0)?;
        match &self.arch {
            Arch::Conv(net) => {
                let t = net.forward(&x)?;
                Ok(EncoderOutput {
                    taps: Taps::Conv {
                        c2: t.c2,
                        c3: t.c3,
                        c4: t.c4,
                    },
                    global: t.global,
                })
            }
            Arch::Vit(net) => {
                let t = net.forward(&x)?;
                Ok(EncoderOutput {
                    taps: Taps::Tokens(t.tokens),
                    global: t.global,
                })
            }
        }
    }

    /// Stride-8 map in the shared embedding space, computed with deployed
    /// weights only (the pooling or class-token projection applied per cell).
    pub fn dense_embedding(&self, out: &EncoderOutput) -> Result<Tensor> {
        match (&self.arch, &out.taps) {
            (Arch::Conv(net), Taps::Conv { c4, .. }) => net.dense(c4),
            (Arch::Vit(net), Taps::Tokens(tokens)) => net.dense(tokens),
            _ => Err(Error::Shape("encoder output does not match architecture".into())),
        }
    }
}

/// Packs row-major H x W x 3 images into a (B, 3, H, W) tensor.
pub fn image_batch(images: &[&[f32]], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * height * width);
    for img in images {
        if img.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} values, expected {height}x{width}x3",
                img.len()
            )));
        }
        for c in 0..3 {
            data.extend((0..height * width).map(|i| img[i * 3 + c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}
