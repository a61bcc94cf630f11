//! Retrieval metrics, the within-part consistency probe and the ablation
//! harness that ties training and evaluation together.

mod harness;
mod probe;
mod retrieval;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use harness::{
    ablation_harness, embed_samples, evaluate_model, export_embeddings_csv, probe_cells, student_transfer, AblationTable,
    Experiment, ReportJson, StudentComparison, VariantRow,
};
pub use probe::{pair_similarities, part_consistency_probe, ridge_probe_accuracy, CellFeatures, ConsistencyScores};
pub use retrieval::{average_precision, compute_cmc_map, EmbeddingGallery, RetrievalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_folds: usize,
    pub probe_ridge: f64,
    /// Seeds used by the ablation and transfer experiments.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_folds: 5,
            probe_ridge: 1.0,
            seeds: vec![0, 1, 2],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.probe_folds >= 2, Config, "probe_folds must be at least 2");
        ensure!(self.probe_ridge > 0.0, Config, "probe_ridge must be positive");
        ensure!(!self.seeds.is_empty(), Config, "at least one seed is required");
        Ok(())
    }
}
