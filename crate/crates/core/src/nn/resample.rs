//! Fixed spatial resampling written as separable matrix products, so every
//! operator is linear and differentiable and gradients accumulate correctly
//! when the input feeds several branches.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

fn matrix(rows: usize, cols: usize, entries: &[(usize, usize, f64)], dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; rows * cols];
    for &(r, c, v) in entries {
        m[r * cols + c] += v;
    }
    Ok(Tensor::from_vec(m, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Interpolation weights for x2 bilinear upsampling with half-pixel centres.
pub fn bilinear_weights(n: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(4 * n);
    for o in 0..2 * n {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        out.push((o, i0, 1.0 - frac));
        out.push((o, i1, frac));
    }
    out
}

fn separable(x: &Tensor, mh: &Tensor, mw: &Tensor) -> Result<Tensor> {
    let along_w = x.broadcast_matmul(&mw.t()?)?;
    Ok(mh.broadcast_matmul(&along_w)?)
}

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    Ok((h, w))
}

/// (B,C,H,W) -> (B,C,2H,2W) bilinear.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(x)?;
    let mh = matrix(2 * h, h, &bilinear_weights(h), x.dtype())?;
    let mw = matrix(2 * w, w, &bilinear_weights(w), x.dtype())?;
    separable(x, &mh, &mw)
}

/// (B,C,H,W) -> (B,C,2H,2W) nearest neighbour.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(x)?;
    let eh: Vec<_> = (0..2 * h).map(|o| (o, o / 2, 1.0)).collect();
    let ew: Vec<_> = (0..2 * w).map(|o| (o, o / 2, 1.0)).collect();
    separable(x, &matrix(2 * h, h, &eh, x.dtype())?, &matrix(2 * w, w, &ew, x.dtype())?)
}

/// (B,C,H,W) -> (B,C,H/2,W/2) 2x2 mean.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve {h}x{w}")));
    }
    let eh: Vec<_> = (0..h).map(|i| (i / 2, i, 0.5)).collect();
    let ew: Vec<_> = (0..w).map(|i| (i / 2, i, 0.5)).collect();
    separable(x, &matrix(h / 2, h, &eh, x.dtype())?, &matrix(w / 2, w, &ew, x.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 1-D reference values for [0, 1, 2] upsampled x2 with edge clamping
        let x = t(vec![0., 1., 2.], (1, 1, 1, 3));
        let y = upsample_bilinear2x(&x).unwrap();
        let row: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(row.len(), 12);
        assert_eq!(&row[..6], &[0.0, 0.25, 0.75, 1.25, 1.75, 2.0]);
        assert_eq!(&row[6..], &row[..6]);
    }

    #[test]
    fn constants_survive_every_resampler() {
        let x = t(vec![3.5; 2 * 3 * 4 * 2], (2, 3, 4, 2));
        for y in [
            upsample_bilinear2x(&x).unwrap(),
            upsample_nearest2x(&x).unwrap(),
            avg_pool2x(&x).unwrap(),
        ] {
            let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|&a| (a - 3.5).abs() < 1e-12));
        }
        assert_eq!(avg_pool2x(&x).unwrap().dims(), &[2, 3, 2, 1]);
        assert_eq!(upsample_nearest2x(&x).unwrap().dims(), &[2, 3, 8, 4]);
    }

    #[test]
    fn avg_pool_matches_candle() {
        let v: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = t(v, (1, 2, 4, 4));
        let a: Vec<f64> = avg_pool2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = x.avg_pool2d(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
