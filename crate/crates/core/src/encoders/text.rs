use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{scaled_dot_attention, LayerNorm, Linear, ParamStore};
use crate::rng::{self, stream};

/// A text-tower output living in the shared image-text space.
#[derive(Clone, Debug)]
pub struct TextEmbedding(pub Tensor);

/// Frozen prompt encoder: one self-attention block over positions, mean
/// pooling and a two-layer projection into the shared space.
#[derive(Debug)]
pub struct TextEncoder {
    params: ParamStore,
    pos: Tensor,
    ln_in: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_out: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    token_dim: usize,
    max_len: usize,
    calls: AtomicUsize,
}

impl TextEncoder {
    pub fn new(token_dim: usize, embed_dim: usize, max_len: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut r = rng::rng_for(seed, &[stream::TEXT_INIT]);
        let mut p = ParamStore::new(dtype);
        let t = token_dim;
        Ok(Self {
            pos: p.normal("text.pos", &[max_len, t], 0.01, &mut r)?,
            ln_in: LayerNorm::new(&mut p, "text.ln_in", t)?,
            q: Linear::new(&mut p, "text.q", t, t, true, &mut r)?,
            k: Linear::new(&mut p, "text.k", t, t, true, &mut r)?,
            v: Linear::new(&mut p, "text.v", t, t, true, &mut r)?,
            o: Linear::new(&mut p, "text.o", t, t, true, &mut r)?,
            ln_out: LayerNorm::new(&mut p, "text.ln_out", t)?,
            fc1: Linear::new(&mut p, "text.fc1", t, t, true, &mut r)?,
            fc2: Linear::new(&mut p, "text.fc2", t, embed_dim, true, &mut r)?,
            params: p,
            token_dim,
            max_len,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn embed_dim(&self) -> usize {
        self.fc2.weight.dim(0).unwrap_or(0)
    }

    /// Number of prompt sequences encoded so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Encodes a batch of equal-length prompts: (B, L, d_t) -> (B, d).
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, l, t) = tokens.dims3()?;
        if l == 0 {
            return Err(Error::Precondition("empty token sequence".into()));
        }
        if l > self.max_len {
            return Err(Error::Precondition(format!(
                "sequence length {l} exceeds maximum {}",
                self.max_len
            )));
        }
        if t != self.token_dim {
            return Err(Error::Shape(format!(
                "token dim {t}, encoder expects {}",
                self.token_dim
            )));
        }
        self.calls.fetch_add(b, Ordering::Relaxed);
        let x = tokens.broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        let h = self.ln_in.forward(&x)?;
        let a = scaled_dot_attention(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?)?;
        let x = (x + self.o.forward(&a)?)?;
        let pooled = x.mean(1)?;
        let z = self.ln_out.forward(&pooled)?;
        self.fc2.forward(&self.fc1.forward(&z)?.relu()?)
    }

    /// Encodes one prompt given as an (L, d_t) matrix.
    pub fn forward_one(&self, tokens: &Tensor) -> Result<TextEmbedding> {
        if tokens.dims().first() == Some(&0) {
            return Err(Error::Precondition("empty token sequence".into()));
        }
        Ok(TextEmbedding(self.forward(&tokens.unsqueeze(0)?)?.squeeze(0)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn mat(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2().unwrap()
    }

    fn linear(l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = mat(&l.weight);
        let b = l.bias.as_ref().map(values).unwrap_or_else(|| vec![0.0; w.len()]);
        w.iter()
            .zip(&b)
            .map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi)
            .collect()
    }

    fn layer_norm(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let g = values(&ln.gamma);
        let b = values(&ln.beta);
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + ln.eps).sqrt() * g[i] + b[i])
            .collect()
    }

    /// Scalar re-implementation of the encoder block.
    fn reference(enc: &TextEncoder, seq: &[Vec<f64>]) -> Vec<f64> {
        let pos = mat(&enc.pos);
        let x: Vec<Vec<f64>> = seq
            .iter()
            .enumerate()
            .map(|(i, tok)| tok.iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
            .collect();
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(&enc.ln_in, r)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| linear(&enc.q, r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| linear(&enc.k, r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| linear(&enc.v, r)).collect();
        let scale = (enc.token_dim as f64).sqrt();
        let mut pooled = vec![0.0; enc.token_dim];
        for i in 0..seq.len() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut a = vec![0.0; enc.token_dim];
            for (j, vj) in v.iter().enumerate() {
                for c in 0..enc.token_dim {
                    a[c] += e[j] / z * vj[c];
                }
            }
            let o = linear(&enc.o, &a);
            for c in 0..enc.token_dim {
                pooled[c] += (x[i][c] + o[c]) / seq.len() as f64;
            }
        }
        let z = layer_norm(&enc.ln_out, &pooled);
        let hidden: Vec<f64> = linear(&enc.fc1, &z).into_iter().map(|v| v.max(0.0)).collect();
        linear(&enc.fc2, &hidden)
    }

    fn encoder() -> TextEncoder {
        TextEncoder::new(16, 8, 16, DType::F64, 3).unwrap()
    }

    fn random_token(seed: u64, dim: usize) -> Vec<f64> {
        (0..dim).map(|i| ((seed * 31 + i as u64) as f64 * 0.7).sin()).collect()
    }

    #[test]
    fn matches_scalar_reference() {
        let enc = encoder();
        let u = random_token(1, 16);
        let w = random_token(2, 16);
        for seq in [vec![u.clone()], vec![u.clone(), u.clone()], vec![w.clone(), u.clone(), w]] {
            let flat: Vec<f64> = seq.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (seq.len(), 16), &Device::Cpu).unwrap();
            let got = values(&enc.forward_one(&t).unwrap().0);
            let want = reference(&enc, &seq);
            assert_eq!(got.len(), 8);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn swapping_identical_tokens_changes_nothing() {
        let enc = encoder();
        let u = random_token(4, 16);
        let w = random_token(5, 16);
        let seq = [u.clone(), w, u].concat();
        let t = Tensor::from_vec(seq, (3, 16), &Device::Cpu).unwrap();
        // swap positions 0 and 2, which hold the same vector
        let swapped = Tensor::cat(&[t.narrow(0, 2, 1).unwrap(), t.narrow(0, 1, 1).unwrap(), t.narrow(0, 0, 1).unwrap()], 0).unwrap();
        assert_eq!(values(&enc.forward_one(&t).unwrap().0), values(&enc.forward_one(&swapped).unwrap().0));
    }

    #[test]
    fn rejects_empty_and_overlong_sequences() {
        let enc = encoder();
        let empty = Tensor::zeros((0, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(enc.forward_one(&empty).is_err());
        let long = Tensor::zeros((17, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(enc.forward_one(&long).is_err());
    }
}
