use candle_core::{Tensor, D};

use super::key_mask;
use crate::error::{ensure, Error, Result};
use crate::nn::{l2_normalize, log_softmax_last};

/// Cross-entropy against label-smoothed targets, averaged over the batch.
pub fn label_smoothed_ce(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    ensure!(n >= 2, Precondition, "need at least two classes, got {n}");
    ensure!(labels.len() == b, Shape, "{} labels for {b} rows", labels.len());
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::UnknownIdentity(bad));
    }
    let off = epsilon / n as f64;
    let mut q = vec![off; b * n];
    for (i, &y) in labels.iter().enumerate() {
        q[i * n + y] = 1.0 - epsilon + off;
    }
    let q = Tensor::from_vec(q, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?;
    Ok((logp * q)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// Identity classification loss over classifier logits.
pub fn id_ce(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    label_smoothed_ce(logits, labels, epsilon)
}

/// Image-to-text cross-entropy against all identity text embeddings.
pub fn i2tce(globals: &Tensor, texts: &Tensor, labels: &[usize], epsilon: f64, logit_scale: f64) -> Result<Tensor> {
    let logits = (l2_normalize(globals)?.matmul(&l2_normalize(texts)?.t()?)? * logit_scale)?;
    label_smoothed_ce(&logits, labels, epsilon)
}

/// Batch-hard triplet loss on L2-normalised embeddings with Euclidean distance.
pub fn triplet_batch_hard(globals: &Tensor, identities: &[usize], margin: f64) -> Result<Tensor> {
    let (b, _) = globals.dims2()?;
    ensure!(identities.len() == b, Shape, "{} identities for {b} rows", identities.len());
    for &y in identities {
        let same = identities.iter().filter(|&&z| z == y).count();
        ensure!(same >= 2, Precondition, "identity {y} has no positive in the batch");
        ensure!(same < b, Precondition, "identity {y} has no negative in the batch");
    }
    let x = l2_normalize(globals)?;
    let sq = (x.matmul(&x.t()?)?.affine(-2.0, 2.0)?.relu()? + 1e-12)?;
    let dist = sq.sqrt()?;
    let same = key_mask(identities, identities, &dist)?;
    let big = 1e6;
    // positives keep their distance, everything else drops far below zero
    let hardest_pos = (dist.mul(&same)? + same.affine(big, -big)?)?.max(D::Minus1)?;
    let hardest_neg = (dist + same.affine(big, 0.0)?)?.min(D::Minus1)?;
    Ok(((hardest_pos - hardest_neg)? + margin)?.relu()?.mean_all()?)
}
