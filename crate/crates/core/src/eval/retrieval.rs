use std::cmp::Ordering;

use candle_core::{DType, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::ConsistencyScores;
use crate::error::{ensure, Error, Result};

/// L2-normalised embeddings with identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGallery {
    dim: usize,
    rows: Vec<f64>,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl EmbeddingGallery {
    /// `rows` is row-major count x dim; each row is normalised on construction.
    pub fn new(rows: Vec<f64>, dim: usize, identities: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        ensure!(dim > 0, Shape, "embedding dimension must be positive");
        ensure!(rows.len() % dim == 0, Shape, "{} values do not form rows of {dim}", rows.len());
        let n = rows.len() / dim;
        ensure!(
            identities.len() == n && cameras.len() == n,
            Shape,
            "{n} rows, {} identities, {} cameras",
            identities.len(),
            cameras.len()
        );
        let mut rows = rows;
        for r in rows.chunks_mut(dim) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure!(norm > 0.0 && norm.is_finite(), Precondition, "embedding row with zero or non-finite norm");
            r.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self {
            dim,
            rows,
            identities,
            cameras,
        })
    }

    pub fn from_tensor(t: &Tensor, identities: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        let (_, d) = t.dims2()?;
        let rows = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Self::new(rows, d, identities, cameras)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Entry k is the match rate within the top k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub aps: Vec<f64>,
    pub consistency: Option<ConsistencyScores>,
}

impl RetrievalReport {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Average precision of a relevance pattern down a ranking.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Relevance pattern of one query after the same-identity-same-camera filter.
fn ranked_relevance(query: &EmbeddingGallery, qi: usize, gallery: &EmbeddingGallery) -> Vec<bool> {
    let q = query.row(qi);
    let (qid, qcam) = (query.identities[qi], query.cameras[qi]);
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&g| !(gallery.identities[g] == qid && gallery.cameras[g] == qcam))
        .map(|g| (gallery.row(g).iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), g))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.iter().map(|&(_, g)| gallery.identities[g] == qid).collect()
}

/// Single-query CMC and mAP with cosine ranking.
pub fn compute_cmc_map(query: &EmbeddingGallery, gallery: &EmbeddingGallery) -> Result<RetrievalReport> {
    ensure!(query.dim == gallery.dim, Shape, "query dim {} vs gallery dim {}", query.dim, gallery.dim);
    ensure!(!query.is_empty(), Precondition, "no queries");
    let patterns: Vec<Vec<bool>> = (0..query.len())
        .into_par_iter()
        .map(|qi| ranked_relevance(query, qi, gallery))
        .collect();
    let offenders: Vec<usize> = patterns
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.iter().any(|&r| r))
        .map(|(i, _)| i)
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Unevaluable(offenders));
    }
    let mut cmc = vec![0.0; gallery.len()];
    let mut aps = Vec::with_capacity(patterns.len());
    for p in &patterns {
        let first = p.iter().position(|&r| r).expect("checked above");
        cmc[first..].iter_mut().for_each(|c| *c += 1.0);
        aps.push(average_precision(p));
    }
    let nq = patterns.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= nq);
    let map = aps.iter().sum::<f64>() / nq;
    Ok(RetrievalReport {
        cmc,
        map,
        aps,
        consistency: None,
    })
}
