//! Fixtures shared by the criterion benches.

use candle_core::{DType, Device, Tensor};
use pivl_core::EmbeddingGallery;

/// Deterministic pseudo-random values in [-1, 1) from a 64-bit LCG.
pub fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(values(n, seed), shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(DType::F32))
        .expect("valid shape")
}

/// Identity labels `0,0,..,1,1,..` with `k` samples per identity.
pub fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i / k).collect()
}

/// A gallery of `ids * per_id` rows around `ids` noisy identity centres.
pub fn gallery(ids: usize, per_id: usize, dim: usize, camera: usize, seed: u64) -> EmbeddingGallery {
    let centres = values(ids * dim, 7);
    let noise = values(ids * per_id * dim, seed);
    let mut rows = Vec::with_capacity(ids * per_id * dim);
    let mut pids = Vec::new();
    for i in 0..ids {
        for j in 0..per_id {
            for c in 0..dim {
                rows.push((centres[i * dim + c] + 0.5 * noise[(i * per_id + j) * dim + c]) as f64);
            }
            pids.push(i);
        }
    }
    let cams = vec![camera; pids.len()];
    EmbeddingGallery::new(rows, dim, pids, cams).expect("non-zero rows")
}
