use candle_core::{Tensor, D};

use super::key_mask;
use crate::error::{ensure, Result};
use crate::nn::{l2_normalize, log_softmax_last};

/// Multi-positive mean of `-log_softmax` per anchor row, averaged over rows.
fn supcon_rows(logits: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let per_row = (logp * pos)?.sum(D::Minus1)?;
    let counts = pos.sum(D::Minus1)?;
    Ok(per_row.div(&counts)?.neg()?.mean_all()?)
}

/// Symmetric image/text contrastive loss with identity-level positives.
///
/// Rows of `images` and `texts` are paired per sample; every sample of the
/// same identity counts as a positive.
pub fn clip_pair_loss(images: &Tensor, texts: &Tensor, identities: &[usize], tau: f64) -> Result<Tensor> {
    let (b, _) = images.dims2()?;
    ensure!(texts.dims2()?.0 == b, Shape, "{} image rows vs {} text rows", b, texts.dims2()?.0);
    ensure!(identities.len() == b, Shape, "{} identities for {} rows", identities.len(), b);
    ensure!(
        identities.iter().any(|&y| y != identities[0]),
        Precondition,
        "contrastive loss needs at least two identities in the batch"
    );
    let v = l2_normalize(images)?;
    let t = l2_normalize(texts)?;
    let logits = (v.matmul(&t.t()?)? / tau)?;
    let pos = key_mask(identities, identities, &logits)?;
    let i2t = supcon_rows(&logits, &pos)?;
    let t2i = supcon_rows(&logits.t()?.contiguous()?, &pos)?;
    Ok((i2t + t2i)?)
}
