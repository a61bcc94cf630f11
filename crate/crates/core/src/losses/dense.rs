use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;

use super::key_mask;
use crate::error::{ensure, Result};
use crate::nn::l2_normalize;
use crate::rng::Rng;
use crate::synthgen::IGNORE;

/// One InfoNCE direction: rows are anchors, columns candidates.
///
/// Each positive pair is scored against all negatives of its anchor, the
/// anchor's other positives are left out of the denominator.
fn info_nce_rows(sim: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    let max = sim.max_keepdim(D::Minus1)?.detach();
    let shifted = sim.broadcast_sub(&max)?;
    let e = shifted.exp()?;
    let neg_sum = (&e * neg)?.sum_keepdim(D::Minus1)?;
    let log_den = e.broadcast_add(&neg_sum)?.log()?;
    let per_pair = (log_den - shifted)?;
    let counts: Vec<f64> = pos.sum(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let anchors = counts.iter().filter(|&&c| c > 0.0).count();
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
    let inv = Tensor::from_vec(inv, counts.len(), sim.device())?.to_dtype(sim.dtype())?;
    let per_anchor = (per_pair * pos)?.sum(D::Minus1)?.mul(&inv)?;
    Ok((per_anchor.sum_all()? / anchors as f64)?)
}

/// Symmetric dense contrastive loss between visual cells and their text targets.
///
/// `keys[i]` is the (identity, part) of cell `i`. A cell pairs positively with
/// every other cell of the same key and negatively with all cells of other keys.
pub fn dense_part_contrastive(visual: &Tensor, text: &Tensor, keys: &[(usize, u8)], tau: f64) -> Result<Tensor> {
    let (n, _) = visual.dims2()?;
    ensure!(text.dims2()?.0 == n, Shape, "{n} visual cells vs {} text cells", text.dims2()?.0);
    ensure!(keys.len() == n, Shape, "{} keys for {n} cells", keys.len());
    let distinct: BTreeSet<_> = keys.iter().collect();
    ensure!(
        distinct.len() >= 2,
        Precondition,
        "dense contrastive loss needs at least two distinct (identity, part) keys"
    );
    ensure!(
        distinct.len() < n,
        Precondition,
        "no positive pairs: every (identity, part) key occurs once"
    );
    let v = l2_normalize(visual)?;
    let t = l2_normalize(text)?;
    let sim = (v.matmul(&t.t()?)? / tau)?;
    let same = key_mask(keys, keys, &sim)?;
    let eye = Tensor::eye(n, sim.dtype(), sim.device())?;
    let pos = (&same - eye)?;
    let neg = same.affine(-1.0, 1.0)?;
    let i2t = info_nce_rows(&sim, &pos, &neg)?;
    let t2i = info_nce_rows(&sim.t()?.contiguous()?, &pos, &neg)?;
    Ok((i2t + t2i)?)
}

/// Picks at most `budget` non-ignored cells of one parsing grid, cycling over
/// parts so each present part is represented. Returned indices are sorted.
pub fn sample_cells(parsing_ds: &[u8], budget: usize, rng: &mut Rng) -> Vec<usize> {
    let mut by_part: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &p) in parsing_ds.iter().enumerate() {
        if p != IGNORE {
            by_part.entry(p).or_default().push(i);
        }
    }
    let total: usize = by_part.values().map(Vec::len).sum();
    if budget >= total {
        return by_part.into_values().flatten().collect::<BTreeSet<_>>().into_iter().collect();
    }
    let mut pools: Vec<Vec<usize>> = by_part
        .into_values()
        .map(|mut v| {
            v.shuffle(rng);
            v.reverse();
            v
        })
        .collect();
    let mut picked = Vec::with_capacity(budget);
    while picked.len() < budget {
        for pool in pools.iter_mut() {
            if picked.len() == budget {
                break;
            }
            if let Some(i) = pool.pop() {
                picked.push(i);
            }
        }
    }
    picked.sort_unstable();
    picked
}

/// Per-cell weights for the alignment loss: ignored cells get 0, background
/// cells `background_weight`, all others 1.
pub fn cell_weights(parsing_ds: &[u8], background_weight: f64) -> Vec<f64> {
    parsing_ds
        .iter()
        .map(|&p| match p {
            IGNORE => 0.0,
            0 => background_weight,
            _ => 1.0,
        })
        .collect()
}

/// Weighted mean squared error between per-cell L2-normalised maps.
///
/// `fused` and `target` are (B, d, h, w); `weights` holds B*h*w cell weights.
pub fn mse_align(fused: &Tensor, target: &Tensor, weights: &[f64]) -> Result<Tensor> {
    ensure!(
        fused.dims() == target.dims(),
        Shape,
        "fused map {:?} vs target {:?}",
        fused.dims(),
        target.dims()
    );
    let (b, _, h, w) = fused.dims4()?;
    ensure!(weights.len() == b * h * w, Shape, "{} weights for {} cells", weights.len(), b * h * w);
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Ok(Tensor::zeros((), fused.dtype(), fused.device())?);
    }
    let unit = |x: &Tensor| -> Result<Tensor> {
        let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(x.broadcast_div(&norm)?)
    };
    let per_cell = (unit(fused)? - unit(target)?)?.sqr()?.mean(1)?;
    let wt = Tensor::from_vec(weights.to_vec(), (b, h, w), fused.device())?.to_dtype(fused.dtype())?;
    Ok(((per_cell * wt)?.sum_all()? / total)?)
}
