use candle_core::{Tensor, D};

use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out, inp], (1.0 / inp as f64).sqrt(), rng)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_gain(store, name, inp, out, kernel, stride, padding, 1.0, rng)
    }

    /// He-normal initialisation scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = inp * kernel * kernel;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[out, inp, kernel, kernel],
            gain * (2.0 / fan_in as f64).sqrt(),
            rng,
        )?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[out], 0.0)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_im2col(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }
}

/// Layer normalisation over the last dimension, built from differentiable primitives.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    pub fn num_params(&self) -> usize {
        self.gamma.elem_count() + self.beta.elem_count()
    }
}

/// Group normalisation over (C/groups, H, W) per sample, with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        crate::error::ensure!(
            groups > 0 && channels % groups == 0,
            Config,
            "{channels} channels do not split into {groups} groups"
        );
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Row-wise L2 normalisation over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Convolution as patch extraction plus one matmul.
///
/// Matches `Tensor::conv2d` but routes the backward pass through gather and
/// matmul gradients instead of direct and transposed convolution kernels,
/// which are much slower on CPU.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, _) = weight.dims4()?;
    crate::error::ensure!(ci == c, Shape, "conv expects {ci} input channels, got {c}");
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    // columns run over (batch, position); index b*h*w is an appended zero
    // column that stands in for padding
    let zero = (b * h * w) as u32;
    let mut idx = Vec::with_capacity(k * k * b * ho * wo);
    for ky in 0..k {
        for kx in 0..k {
            for n in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        let x = (ox * stride + kx) as isize - padding as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                        idx.push(if inside { (n * h * w + y as usize * w + x as usize) as u32 } else { zero });
                    }
                }
            }
        }
    }
    let idx = Tensor::from_vec(idx, k * k * b * ho * wo, x.device())?;
    let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
    let flat = Tensor::cat(&[&flat, &flat.narrow(1, 0, 1)?.zeros_like()?], 1)?;
    let patches = flat.index_select(&idx, 1)?.reshape((c * k * k, b * ho * wo))?;
    let y = weight.reshape((o, c * k * k))?.matmul(&patches)?;
    Ok(y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn group_norm_standardises_each_group() {
        let mut store = ParamStore::new(candle_core::DType::F64);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
        let vals: Vec<f64> = (0..72).map(|i| 5.0 * (i as f64 * 1.7).sin() + 2.0).collect();
        let x = Tensor::from_vec(vals, (3, 4, 2, 3), &Device::Cpu).unwrap();
        let y: Vec<f64> = gn.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for group in y.chunks(12) {
            let m = group.iter().sum::<f64>() / 12.0;
            let v = group.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(GroupNorm::new(&mut store, "bad", 5, 2).is_err());
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        for (k, s, p, h, w) in [(3, 1, 1, 6, 5), (3, 2, 1, 8, 6), (3, 2, 1, 7, 5), (4, 4, 0, 8, 8), (1, 1, 0, 3, 2)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, h, w), &Device::Cpu).unwrap();
            let wt = Tensor::randn(0f64, 1.0, (4, 3, k, k), &Device::Cpu).unwrap();
            let want = x.conv2d(&wt, p, s, 1, 1).unwrap();
            let got = conv2d_im2col(&x, &wt, s, p).unwrap();
            assert_eq!(want.dims(), got.dims());
            let diff: f64 = (want - got).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-12, "k={k} s={s}: {diff}");
        }
    }

    #[test]
    fn im2col_gradients_match_direct_convolution() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 8, 6), &Device::Cpu).unwrap()).unwrap();
        let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &Device::Cpu).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 4, 3), &Device::Cpu).unwrap();
        let loss = |y: Tensor| (y * &probe).unwrap().sum_all().unwrap();
        let g1 = loss(x.conv2d(&wt, 1, 2, 1, 1).unwrap()).backward().unwrap();
        let g2 = loss(conv2d_im2col(&x, &wt, 2, 1).unwrap()).backward().unwrap();
        for v in [&x, &wt] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            let diff: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-10, "{diff}");
        }
    }
}
