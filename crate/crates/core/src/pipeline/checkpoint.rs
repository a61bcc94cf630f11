use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stage2::{Stage2Model, Stage2Options};
use super::{write_atomic, AblationFlags};
use crate::config::RunConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
    pub training_only: bool,
}

/// Sidecar describing a stage-2 checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub flags: AblationFlags,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub config: RunConfig,
    /// Digest of the RNG stream state the run was seeded from.
    pub rng_digest: String,
    pub blobs: Vec<BlobEntry>,
}

pub type Stage2Checkpoint = (Stage2Model, CheckpointMeta);

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `encoder.safetensors`, `head.safetensors` (fusion head and
/// classifier, marked training-only) and `checkpoint.json` into `dir`.
pub fn save_stage2_checkpoint(dir: &Path, model: &Stage2Model, cfg: &RunConfig, stage: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let enc = dir.join("encoder.safetensors");
    let head = dir.join("head.safetensors");
    write_atomic(&enc, |p| model.encoder.params().save(p))?;
    write_atomic(&head, |p| {
        let mut all = model.head.params().snapshot()?;
        all.extend(model.classifier_params.snapshot()?);
        Ok(candle_core::safetensors::save(&all, p)?)
    })?;
    let seed_state = crate::rng::derive_seed(cfg.seed, &[crate::rng::stream::STAGE2]);
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        epoch: model.epochs,
        flags: model.flags,
        encoder: model.encoder.config().clone(),
        num_classes: model.classifier.weight.dim(0)?,
        config: cfg.clone(),
        rng_digest: hex::encode(Sha256::digest(seed_state.to_le_bytes())),
        blobs: vec![
            BlobEntry {
                file: "encoder.safetensors".into(),
                sha256: file_digest(&enc)?,
                training_only: false,
            },
            BlobEntry {
                file: "head.safetensors".into(),
                sha256: file_digest(&head)?,
                training_only: true,
            },
        ],
    };
    let sidecar = dir.join("checkpoint.json");
    let json = serde_json::to_vec_pretty(&meta)?;
    write_atomic(&sidecar, |p| Ok(fs::write(p, &json)?))?;
    Ok(vec![enc, head, sidecar])
}

pub fn load_stage2_checkpoint(dir: &Path) -> Result<Stage2Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)?;
    for blob in &meta.blobs {
        let actual = file_digest(&dir.join(&blob.file))?;
        if actual != blob.sha256 {
            return Err(Error::Checkpoint(format!("{} digest mismatch", blob.file)));
        }
    }
    let opts = Stage2Options {
        flags: meta.flags,
        text_terms: true,
        encoder: meta.encoder.clone(),
        init_stream: crate::rng::stream::ENCODER_INIT,
    };
    let mut model = Stage2Model::init(&meta.config, &opts, meta.num_classes)?;
    model.encoder.params().load(&dir.join("encoder.safetensors"))?;
    let head = candle_core::safetensors::load(dir.join("head.safetensors"), &candle_core::Device::Cpu)?;
    let (fusion, classifier): (std::collections::HashMap<_, _>, std::collections::HashMap<_, _>) =
        head.into_iter().partition(|(k, _)| k.starts_with("fusion."));
    model.head.params().assign(&fusion)?;
    model.classifier_params.assign(&classifier)?;
    model.epochs = meta.epoch;
    Ok((model, meta))
}
