//! Training objectives for both stages.

mod contrastive;
mod dense;
mod reid;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use contrastive::clip_pair_loss;
pub use dense::{cell_weights, dense_part_contrastive, mse_align, sample_cells};
pub use reid::{i2tce, id_ce, label_smoothed_ce, triplet_batch_hard};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub id: f64,
    pub triplet: f64,
    pub i2tce: f64,
    pub align: f64,
    pub part: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 1.0,
            triplet: 1.0,
            i2tce: 1.0,
            align: 1.0,
            part: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub margin: f64,
    pub logit_scale: f64,
    pub weights: LossWeights,
    /// Dense-loss cell budget per image.
    pub cells_per_image: usize,
    /// Multiplier for background cells in the alignment loss.
    pub background_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            epsilon: 0.1,
            margin: 0.3,
            logit_scale: 1.0 / 0.07,
            weights: LossWeights::default(),
            cells_per_image: 64,
            background_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, Config, "tau must be positive, got {}", self.tau);
        ensure!(
            (0.0..1.0).contains(&self.epsilon),
            Config,
            "epsilon must lie in [0, 1), got {}",
            self.epsilon
        );
        ensure!(self.margin >= 0.0, Config, "margin must be non-negative, got {}", self.margin);
        ensure!(self.logit_scale > 0.0, Config, "logit_scale must be positive");
        let w = &self.weights;
        ensure!(
            [w.id, w.triplet, w.i2tce, w.align, w.part].iter().all(|&x| x >= 0.0),
            Config,
            "loss weights must be non-negative"
        );
        ensure!(self.cells_per_image > 0, Config, "cells_per_image must be positive");
        ensure!(self.background_weight >= 0.0, Config, "background_weight must be non-negative");
        Ok(())
    }
}

fn weighted_sum(terms: &[(f64, Option<&Tensor>)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (w, t) in terms {
        let Some(t) = t else { continue };
        if *w == 0.0 {
            continue;
        }
        let scaled = if *w == 1.0 { (*t).clone() } else { t.affine(*w, 0.0)? };
        total = Some(match total {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let like = terms.iter().find_map(|(_, t)| *t).expect("at least one term");
            Ok(like.zeros_like()?)
        }
    }
}

/// Stage-1 objective: contrastive pair loss plus the weighted dense part term.
pub fn prompt_objective(clip_pair: &Tensor, part: Option<&Tensor>, cfg: &LossConfig) -> Result<Tensor> {
    weighted_sum(&[(1.0, Some(clip_pair)), (cfg.weights.part, part)])
}

/// Stage-2 loss terms for one batch.
#[derive(Clone, Debug)]
pub struct ReidTerms {
    pub id: Tensor,
    pub triplet: Tensor,
    pub i2tce: Option<Tensor>,
    pub align: Option<Tensor>,
}

impl ReidTerms {
    /// Named scalar values for logging.
    pub fn values(&self) -> Result<Vec<(&'static str, f64)>> {
        let mut out = vec![("id", scalar(&self.id)?), ("triplet", scalar(&self.triplet)?)];
        if let Some(t) = &self.i2tce {
            out.push(("i2tce", scalar(t)?));
        }
        if let Some(a) = &self.align {
            out.push(("align", scalar(a)?));
        }
        Ok(out)
    }
}

pub fn overall_objective(terms: &ReidTerms, cfg: &LossConfig) -> Result<Tensor> {
    let w = &cfg.weights;
    weighted_sum(&[
        (w.id, Some(&terms.id)),
        (w.triplet, Some(&terms.triplet)),
        (w.i2tce, terms.i2tce.as_ref()),
        (w.align, terms.align.as_ref()),
    ])
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Same-key indicator matrix as a tensor of 0/1 values.
pub(crate) fn key_mask<K: PartialEq>(rows: &[K], cols: &[K], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = rows
        .iter()
        .flat_map(|a| cols.iter().map(move |b| if a == b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (rows.len(), cols.len()), like.device())?.to_dtype(like.dtype())?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn prompt_objective_recomposes() {
        let cfg = LossConfig::default();
        let total = prompt_objective(&t(0.7), Some(&t(1.3)), &cfg).unwrap();
        assert!((scalar(&total).unwrap() - 2.0).abs() < 1e-12);
        let mut off = cfg.clone();
        off.weights.part = 0.0;
        let only = prompt_objective(&t(0.7), Some(&t(1.3)), &off).unwrap();
        assert_eq!(scalar(&only).unwrap(), 0.7);
    }

    #[test]
    fn overall_objective_recomposes() {
        let mut cfg = LossConfig::default();
        cfg.weights.triplet = 0.5;
        cfg.weights.align = 2.0;
        let terms = ReidTerms {
            id: t(1.0),
            triplet: t(0.4),
            i2tce: Some(t(3.0)),
            align: Some(t(0.25)),
        };
        let v = scalar(&overall_objective(&terms, &cfg).unwrap()).unwrap();
        assert!((v - (1.0 + 0.2 + 3.0 + 0.5)).abs() < 1e-12);
        let no_align = ReidTerms { align: None, ..terms };
        let v = scalar(&overall_objective(&no_align, &cfg).unwrap()).unwrap();
        assert!((v - 4.2).abs() < 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_validation());
        let bad = LossConfig { epsilon: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = LossConfig::default();
        bad.weights.id = -1.0;
        assert!(bad.validate().is_err());
    }
}
