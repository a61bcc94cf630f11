use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use super::{cosine_lr, pk_sample, Adam, TrainingLog};
use crate::config::RunConfig;
use crate::encoders::{image_batch, ImageEncoder, TextEncoder};
use crate::error::{ensure, Result};
use crate::losses::{clip_pair_loss, dense_part_contrastive, prompt_objective, sample_cells, scalar};
use crate::prompts::PromptContextStore;
use crate::rng::{self, stream};
use crate::synthgen::{downsample_parsing, DatasetSplit, PartVocabulary, SyntheticSample};

/// Prompts after identity warm-up and after part-informed tuning.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub warmup: PromptContextStore,
    pub part: PromptContextStore,
}

impl Stage1Output {
    /// Writes `prompts_warmup.*` and `prompts_part.*` under `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        let mut files = self.warmup.save(dir, "prompts_warmup", "warmup")?;
        files.extend(self.part.save(dir, "prompts_part", "part")?);
        Ok(files)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        Ok(Self {
            warmup: PromptContextStore::load(dir, "prompts_warmup", TRAIN_DTYPE)?,
            part: PromptContextStore::load(dir, "prompts_part", TRAIN_DTYPE)?,
        })
    }
}

/// Frozen encoder outputs for a sample list.
pub(crate) struct FrozenFeatures {
    /// (N, d)
    pub globals: Tensor,
    /// (N * cells, d), cell-major within each sample.
    pub cells: Tensor,
    pub cells_per_sample: usize,
    pub parsing_ds: Vec<Vec<u8>>,
}

impl FrozenFeatures {
    pub fn compute(encoder: &ImageEncoder, samples: &[SyntheticSample]) -> Result<Self> {
        let (h, w) = encoder.input_dims();
        let dtype = encoder.params().dtype();
        let mut globals = Vec::new();
        let mut cells = Vec::new();
        for chunk in samples.chunks(64) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
            let out = encoder.forward(&image_batch(&imgs, h, w, dtype)?)?;
            let dense = encoder.dense_embedding(&out)?;
            let (b, d, gh, gw) = dense.dims4()?;
            globals.push(out.global.detach());
            cells.push(dense.reshape((b, d, gh * gw))?.transpose(1, 2)?.reshape((b * gh * gw, d))?.detach());
        }
        let parsing_ds = samples
            .iter()
            .map(|s| downsample_parsing(&s.parsing, s.height, s.width, 8))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            globals: Tensor::cat(&globals, 0)?,
            cells: Tensor::cat(&cells, 0)?,
            cells_per_sample: (h / 8) * (w / 8),
            parsing_ds,
        })
    }
}

/// Prompt tuning: identity warm-up with the pair loss, then part-informed
/// tuning with pair and dense losses. Only the context tokens move.
pub fn run_stage1(
    data: &DatasetSplit,
    cfg: &RunConfig,
    encoder: &ImageEncoder,
    text: &TextEncoder,
    log: &mut TrainingLog,
) -> Result<Stage1Output> {
    let tc = &cfg.train;
    ensure!(
        encoder.config().embed_dim == text.embed_dim(),
        Shape,
        "image embedding width {} differs from text width {}",
        encoder.config().embed_dim,
        text.embed_dim()
    );
    let train = &data.train;
    let identities: Vec<usize> = (0..data.num_train_ids).collect();
    let parts = PartVocabulary::new(cfg.data.num_parts)?;
    let store = PromptContextStore::new(
        &identities,
        tc.context_tokens,
        &parts,
        text.token_dim(),
        encoder.params().dtype(),
        cfg.seed,
    )?;
    let feats = FrozenFeatures::compute(encoder, train)?;
    let steps_per_epoch = (train.len() / tc.batch_size()).max(1);
    let warm_steps = tc.stage1_id_epochs * steps_per_epoch;
    let total = warm_steps + tc.stage1_part_epochs * steps_per_epoch;
    let num_parts = parts.len();

    let mut opt = Adam::new(store.trainable())?;
    let mut rng = rng::rng_for(cfg.seed, &[stream::STAGE1]);
    let mut warmup = None;
    for step in 0..total {
        if step == warm_steps {
            warmup = Some(store.snapshot()?);
        }
        let batch = pk_sample(train, tc.p, tc.k, &mut rng)?;
        let rows: Vec<u32> = batch.indices.iter().map(|&i| i as u32).collect();
        let rows = Tensor::new(rows.as_slice(), feats.globals.device())?;
        let images = feats.globals.index_select(&rows, 0)?;
        let texts = text.forward(&store.identity_prompts(&batch.identities)?)?;
        let clip = clip_pair_loss(&images, &texts, &batch.identities, cfg.loss.tau)?;
        let mut terms = vec![("clip_pair", scalar(&clip)?)];

        let loss = if step >= warm_steps {
            let mut uniq: Vec<usize> = batch.identities.clone();
            uniq.sort_unstable();
            uniq.dedup();
            let pos: BTreeMap<usize, usize> = uniq.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let table = store.encode_part_table(text, &uniq)?;
            let mut cell_rows = Vec::new();
            let mut text_rows = Vec::new();
            let mut keys = Vec::new();
            for (&sample, &id) in batch.indices.iter().zip(&batch.identities) {
                let grid = &feats.parsing_ds[sample];
                for c in sample_cells(grid, cfg.loss.cells_per_image, &mut rng) {
                    cell_rows.push((sample * feats.cells_per_sample + c) as u32);
                    text_rows.push((pos[&id] * num_parts + grid[c] as usize) as u32);
                    keys.push((id, grid[c]));
                }
            }
            let dev = feats.cells.device();
            let visual = feats.cells.index_select(&Tensor::new(cell_rows.as_slice(), dev)?, 0)?;
            let targets = table.index_select(&Tensor::new(text_rows.as_slice(), dev)?, 0)?;
            let part = dense_part_contrastive(&visual, &targets, &keys, cfg.loss.tau)?;
            terms.push(("part", scalar(&part)?));
            prompt_objective(&clip, Some(&part), &cfg.loss)?
        } else {
            prompt_objective(&clip, None, &cfg.loss)?
        };
        terms.push(("total", scalar(&loss)?));
        opt.step(&loss.backward()?, cosine_lr(tc.lr_stage1, step, total))?;
        log.record(step, "stage1", &terms)?;
    }
    let part = store.snapshot()?;
    Ok(Stage1Output {
        warmup: match warmup {
            Some(w) => w,
            None => part.clone(),
        },
        part,
    })
}

/// The dtype used for all training runs.
pub(crate) const TRAIN_DTYPE: DType = DType::F32;
