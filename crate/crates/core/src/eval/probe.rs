use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{self, stream};
use crate::synthgen::IGNORE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub intra_part_sim: f64,
    pub inter_part_sim: f64,
    pub part_probe_acc: f64,
}

/// Stride-8 cell features of a set of images with their part labels.
#[derive(Clone, Debug)]
pub struct CellFeatures {
    pub dim: usize,
    /// Row-major cells x dim.
    pub rows: Vec<f64>,
    pub parts: Vec<u8>,
    pub identities: Vec<usize>,
    /// Source image of each cell, used to keep folds image-disjoint.
    pub images: Vec<usize>,
}

impl CellFeatures {
    /// Drops `IGNORE` cells.
    pub fn without_ignored(self) -> Self {
        let keep: Vec<usize> = (0..self.parts.len()).filter(|&i| self.parts[i] != IGNORE).collect();
        let d = self.dim;
        Self {
            dim: d,
            rows: keep.iter().flat_map(|&i| self.rows[i * d..(i + 1) * d].to_vec()).collect(),
            parts: keep.iter().map(|&i| self.parts[i]).collect(),
            identities: keep.iter().map(|&i| self.identities[i]).collect(),
            images: keep.iter().map(|&i| self.images[i]).collect(),
        }
    }
}

fn unit_rows(rows: &[f64], d: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for r in out.chunks_mut(d) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Mean pairwise cosine similarity within (identity, part) groups and across
/// parts of one identity. Both means run over all distinct cell pairs, using
/// the identity sum_{i<j} <u_i, u_j> = (|sum u|^2 - sum |u|^2) / 2.
pub fn pair_similarities(cells: &CellFeatures) -> (f64, f64) {
    let d = cells.dim;
    let unit = unit_rows(&cells.rows, d);
    let mut group: BTreeMap<(usize, u8), (Vec<f64>, f64, usize)> = BTreeMap::new();
    for (i, (&id, &p)) in cells.identities.iter().zip(&cells.parts).enumerate() {
        let row = &unit[i * d..(i + 1) * d];
        let e = group.entry((id, p)).or_insert_with(|| (vec![0.0; d], 0.0, 0));
        e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        e.1 += sq_norm(row);
        e.2 += 1;
    }
    let mut per_id: BTreeMap<usize, (Vec<f64>, f64, f64, f64)> = BTreeMap::new();
    let (mut intra_sum, mut intra_pairs) = (0.0, 0.0);
    for (&(id, _), (sum, sq, n)) in &group {
        let within = (sq_norm(sum) - sq) / 2.0;
        let pairs = (*n * n.saturating_sub(1)) as f64 / 2.0;
        intra_sum += within;
        intra_pairs += pairs;
        let e = per_id.entry(id).or_insert_with(|| (vec![0.0; d], 0.0, 0.0, 0.0));
        e.0.iter_mut().zip(sum).for_each(|(a, b)| *a += b);
        e.1 += sq_norm(sum);
        e.2 += *n as f64;
        e.3 += (*n * *n) as f64;
    }
    let (mut inter_sum, mut inter_pairs) = (0.0, 0.0);
    for (sum, group_sq, n, n_sq) in per_id.values() {
        inter_sum += (sq_norm(sum) - group_sq) / 2.0;
        inter_pairs += (n * n - n_sq) / 2.0;
    }
    let mean = |s: f64, c: f64| if c > 0.0 { s / c } else { 0.0 };
    (mean(intra_sum, intra_pairs), mean(inter_sum, inter_pairs))
}

/// Image-disjoint k-fold accuracy of a one-vs-rest ridge classifier that
/// predicts the part id of each cell from its standardised features.
pub fn ridge_probe_accuracy(cells: &CellFeatures, folds: usize, lambda: f64, seed: u64) -> Result<f64> {
    let n = cells.parts.len();
    let d = cells.dim;
    ensure!(n > 0, Precondition, "probe needs at least one cell");
    ensure!(folds >= 2, Config, "probe needs at least two folds");
    let classes: Vec<u8> = {
        let mut c = cells.parts.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let class_of: BTreeMap<u8, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut images: Vec<usize> = cells.images.clone();
    images.sort_unstable();
    images.dedup();
    images.shuffle(&mut rng::rng_for(seed, &[stream::PROBE]));
    let fold_of: BTreeMap<usize, usize> = images.iter().enumerate().map(|(i, &img)| (img, i % folds)).collect();

    let mut correct = 0usize;
    let mut tested = 0usize;
    for fold in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[&cells.images[i]] != fold);
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let nt = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &train {
            mean.iter_mut().zip(&cells.rows[i * d..(i + 1) * d]).for_each(|(m, x)| *m += x / nt);
        }
        let mut std = vec![0.0; d];
        for &i in &train {
            for (k, x) in cells.rows[i * d..(i + 1) * d].iter().enumerate() {
                std[k] += (x - mean[k]).powi(2) / nt;
            }
        }
        let std: Vec<f64> = std.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { f64::INFINITY }).collect();
        let standardise = |i: usize| -> Vec<f64> {
            cells.rows[i * d..(i + 1) * d]
                .iter()
                .enumerate()
                .map(|(k, x)| (x - mean[k]) / std[k])
                .collect()
        };
        let x = DMatrix::from_fn(train.len(), d, |r, c| standardise(train[r])[c]);
        let mut prior = vec![0.0; classes.len()];
        for &i in &train {
            prior[class_of[&cells.parts[i]]] += 1.0 / nt;
        }
        let y = DMatrix::from_fn(train.len(), classes.len(), |r, c| {
            let hit = if class_of[&cells.parts[train[r]]] == c { 1.0 } else { 0.0 };
            hit - prior[c]
        });
        let gram = x.transpose() * &x + DMatrix::identity(d, d) * lambda;
        let rhs = x.transpose() * y;
        let w = gram
            .cholesky()
            .ok_or_else(|| crate::error::Error::Precondition("ridge system not positive definite".into()))?
            .solve(&rhs);
        for &i in &test {
            let xi = DMatrix::from_row_slice(1, d, &standardise(i));
            let scores = xi * &w;
            let mut best = 0;
            for c in 1..classes.len() {
                if scores[(0, c)] + prior[c] > scores[(0, best)] + prior[best] {
                    best = c;
                }
            }
            if classes[best] == cells.parts[i] {
                correct += 1;
            }
            tested += 1;
        }
    }
    ensure!(tested > 0, Precondition, "probe folds left no test cells");
    Ok(correct as f64 / tested as f64)
}

/// Within-part consistency scores of a cell-feature set.
pub fn part_consistency_probe(cells: &CellFeatures, folds: usize, lambda: f64, seed: u64) -> Result<ConsistencyScores> {
    let cells = cells.clone().without_ignored();
    let (intra, inter) = pair_similarities(&cells);
    Ok(ConsistencyScores {
        intra_part_sim: intra,
        inter_part_sim: inter,
        part_probe_acc: ridge_probe_accuracy(&cells, folds, lambda, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cells_from(rows: Vec<f64>, dim: usize, parts: Vec<u8>, identities: Vec<usize>, per_image: usize) -> CellFeatures {
        let images = (0..parts.len()).map(|i| i / per_image).collect();
        CellFeatures {
            dim,
            rows,
            parts,
            identities,
            images,
        }
    }

    /// Explicit enumeration of all pairs.
    fn brute(cells: &CellFeatures) -> (f64, f64) {
        let d = cells.dim;
        let u = unit_rows(&cells.rows, d);
        let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..cells.parts.len() {
            for j in i + 1..cells.parts.len() {
                if cells.identities[i] != cells.identities[j] {
                    continue;
                }
                let s: f64 = (0..d).map(|k| u[i * d + k] * u[j * d + k]).sum();
                if cells.parts[i] == cells.parts[j] {
                    a += s;
                    na += 1;
                } else {
                    b += s;
                    nb += 1;
                }
            }
        }
        (a / na as f64, b / nb as f64)
    }

    #[test]
    fn pair_means_match_enumeration() {
        let mut r = rng::rng_for(5, &[]);
        let n = 60;
        let d = 5;
        let rows: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let parts: Vec<u8> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let c = cells_from(rows, d, parts, ids, 6);
        let (a, b) = pair_similarities(&c);
        let (ea, eb) = brute(&c);
        assert!((a - ea).abs() < 1e-12 && (b - eb).abs() < 1e-12);
    }

    #[test]
    fn constant_features() {
        let n = 50;
        let parts: Vec<u8> = (0..n).map(|i| if i % 5 == 0 { 1 } else { 0 }).collect();
        let c = cells_from(vec![0.5; n * 3], 3, parts, vec![0; n], 5);
        let s = part_consistency_probe(&c, 5, 1.0, 0).unwrap();
        assert!((s.intra_part_sim - 1.0).abs() < 1e-12);
        assert!((s.inter_part_sim - 1.0).abs() < 1e-12);
        assert!((s.part_probe_acc - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_hot_features() {
        let n = 60;
        let parts: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let rows: Vec<f64> = parts.iter().flat_map(|&p| (0..4).map(move |k| if k == p { 1.0 } else { 0.0 })).collect();
        let c = cells_from(rows, 4, parts, vec![7; n], 4);
        let s = part_consistency_probe(&c, 5, 1.0, 0).unwrap();
        assert_eq!(s.part_probe_acc, 1.0);
        assert_eq!(s.inter_part_sim, 0.0);
        assert_eq!(s.intra_part_sim, 1.0);
    }

    #[test]
    fn probe_is_deterministic_and_skips_ignored() {
        let mut r = rng::rng_for(6, &[]);
        let n = 80;
        let rows: Vec<f64> = (0..n * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut parts: Vec<u8> = (0..n).map(|_| r.gen_range(0..3)).collect();
        parts[3] = IGNORE;
        let c = cells_from(rows, 4, parts, vec![0; n], 8);
        let a = part_consistency_probe(&c, 5, 1.0, 11).unwrap();
        let b = part_consistency_probe(&c, 5, 1.0, 11).unwrap();
        assert_eq!(a, b);
    }
}
