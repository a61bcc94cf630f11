use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::{part_consistency_probe, CellFeatures};
use super::retrieval::{compute_cmc_map, EmbeddingGallery, RetrievalReport};
use crate::config::RunConfig;
use crate::encoders::{image_batch, ImageEncoder, TextEncoder};
use crate::error::Result;
use crate::pipeline::{
    run_stage1, run_stage2, train_student, AblationFlags, Stage1Output, Stage2Model, Stage2Options, TrainingLog,
};
use crate::rng::stream;
use crate::synthgen::{downsample_parsing, generate_dataset, DatasetSplit, SyntheticSample};

const BATCH: usize = 64;

/// Dataset, frozen encoders and stage-1 prompts for one seed.
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: DatasetSplit,
    pub encoder: ImageEncoder,
    pub text: TextEncoder,
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_dataset(&cfg.data, cfg.seed)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: &RunConfig, data: DatasetSplit) -> Result<Self> {
        let dtype = candle_core::DType::F32;
        let encoder = ImageEncoder::new(&cfg.encoder, cfg.data.height, cfg.data.width, dtype, cfg.seed, stream::ENCODER_INIT)?;
        let text = TextEncoder::new(
            cfg.encoder.text_dim,
            cfg.encoder.embed_dim,
            cfg.encoder.text_max_len,
            dtype,
            cfg.seed,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            encoder,
            text,
        })
    }

    pub fn stage1(&self, log: &mut TrainingLog) -> Result<Stage1Output> {
        run_stage1(&self.data, &self.cfg, &self.encoder, &self.text, log)
    }

    pub fn stage2(&self, stage1: &Stage1Output, flags: AblationFlags, log: &mut TrainingLog) -> Result<Stage2Model> {
        let opts = Stage2Options::teacher(&self.cfg, flags);
        run_stage2(&self.data, &self.cfg, stage1, &self.text, &opts, log)
    }
}

/// Global embeddings of `samples`, computed without augmentation.
pub fn embed_samples(encoder: &ImageEncoder, samples: &[SyntheticSample]) -> Result<EmbeddingGallery> {
    let (h, w) = encoder.input_dims();
    let mut rows = Vec::new();
    for chunk in samples.chunks(BATCH) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let out = encoder.forward(&image_batch(&imgs, h, w, encoder.params().dtype())?)?;
        rows.extend(out.global.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    EmbeddingGallery::new(
        rows,
        encoder.config().embed_dim,
        samples.iter().map(|s| s.identity).collect(),
        samples.iter().map(|s| s.camera).collect(),
    )
}

/// Stride-8 cell features of `samples` from the model's alignment map.
pub fn probe_cells(model: &Stage2Model, samples: &[SyntheticSample]) -> Result<CellFeatures> {
    let (h, w) = model.encoder.input_dims();
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    let mut identities = Vec::new();
    let mut images = Vec::new();
    let mut dim = 0;
    for (c, chunk) in samples.chunks(BATCH).enumerate() {
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let map = model.alignment_map(&image_batch(&imgs, h, w, model.encoder.params().dtype())?)?;
        let (b, d, gh, gw) = map.dims4()?;
        dim = d;
        let cells = map.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?;
        rows.extend(cells.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        for (k, s) in chunk.iter().enumerate() {
            let grid = downsample_parsing(&s.parsing, s.height, s.width, 8)?;
            parts.extend(grid);
            identities.extend(std::iter::repeat(s.identity).take(gh * gw));
            images.extend(std::iter::repeat(c * BATCH + k).take(gh * gw));
        }
    }
    Ok(CellFeatures {
        dim,
        rows,
        parts,
        identities,
        images,
    })
}

/// Retrieval metrics on query/gallery plus the consistency probe on all test images.
pub fn evaluate_model(model: &Stage2Model, data: &DatasetSplit, cfg: &RunConfig) -> Result<RetrievalReport> {
    let q = embed_samples(&model.encoder, &data.query)?;
    let g = embed_samples(&model.encoder, &data.gallery)?;
    let mut report = compute_cmc_map(&q, &g)?;
    let test: Vec<SyntheticSample> = data.query.iter().chain(&data.gallery).cloned().collect();
    let cells = probe_cells(model, &test)?;
    report.consistency = Some(part_consistency_probe(&cells, cfg.eval.probe_folds, cfg.eval.probe_ridge, cfg.seed)?);
    Ok(report)
}

/// Report document written by the evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub map: f64,
    pub cmc: BTreeMap<String, f64>,
    pub consistency: Option<super::probe::ConsistencyScores>,
    pub config_digest: String,
}

impl ReportJson {
    pub fn new(report: &RetrievalReport, cfg: &RunConfig) -> Self {
        Self {
            map: report.map,
            cmc: [1, 5, 10].iter().map(|&k| (k.to_string(), report.rank(k))).collect(),
            consistency: report.consistency.clone(),
            config_digest: cfg.digest(),
        }
    }
}

/// CSV with header `identity,camera,e0..e{d-1}`, nine significant digits.
pub fn export_embeddings_csv(gallery: &EmbeddingGallery, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = ["identity".to_string(), "camera".to_string()]
        .into_iter()
        .chain((0..gallery.dim()).map(|i| format!("e{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..gallery.len() {
        let vals: Vec<String> = gallery.row(i).iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(out, "{},{},{}", gallery.identities[i], gallery.cameras[i], vals.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub probe_acc: f64,
    pub intra_part_sim: f64,
    pub inter_part_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub rank1: f64,
    pub map: f64,
    pub probe_acc: f64,
    pub intra_part_sim: f64,
    pub inter_part_sim: f64,
    pub delta_rank1: f64,
    pub delta_map: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn seed_result(seed: u64, r: &RetrievalReport) -> SeedResult {
    let c = r.consistency.clone().unwrap_or(super::probe::ConsistencyScores {
        intra_part_sim: f64::NAN,
        inter_part_sim: f64::NAN,
        part_probe_acc: f64::NAN,
    });
    SeedResult {
        seed,
        rank1: r.rank(1),
        map: r.map,
        probe_acc: c.part_probe_acc,
        intra_part_sim: c.intra_part_sim,
        inter_part_sim: c.inter_part_sim,
    }
}

/// Trains and evaluates B, B+H, B+P and B+P+F for every seed and reports
/// per-variant medians with deltas against B. Variants of one seed share
/// data, initialisation and batch order.
pub fn ablation_harness(base: &RunConfig, seeds: &[u64], mut on_result: impl FnMut(&str, &SeedResult)) -> Result<AblationTable> {
    let variants = [AblationFlags::B, AblationFlags::BH, AblationFlags::BP, AblationFlags::BPF];
    let mut results: Vec<Vec<SeedResult>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let exp = Experiment::prepare(&cfg)?;
        let mut log = TrainingLog::in_memory();
        let s1 = exp.stage1(&mut log)?;
        for (v, flags) in variants.iter().enumerate() {
            let model = exp.stage2(&s1, *flags, &mut log)?;
            let r = seed_result(seed, &evaluate_model(&model, &exp.data, &cfg)?);
            on_result(&flags.label(), &r);
            results[v].push(r);
        }
    }
    let med = |rs: &[SeedResult], f: fn(&SeedResult) -> f64| median(&rs.iter().map(f).collect::<Vec<_>>());
    let base_rank1 = med(&results[0], |r| r.rank1);
    let base_map = med(&results[0], |r| r.map);
    let rows = variants
        .iter()
        .zip(results)
        .map(|(flags, rs)| {
            let rank1 = med(&rs, |r| r.rank1);
            let map = med(&rs, |r| r.map);
            VariantRow {
                variant: flags.label(),
                rank1,
                map,
                probe_acc: med(&rs, |r| r.probe_acc),
                intra_part_sim: med(&rs, |r| r.intra_part_sim),
                inter_part_sim: med(&rs, |r| r.inter_part_sim),
                delta_rank1: rank1 - base_rank1,
                delta_map: map - base_map,
                per_seed: rs,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentComparison {
    pub seeds: Vec<u64>,
    pub with_prompts_map: Vec<f64>,
    pub baseline_map: Vec<f64>,
    pub with_prompts_rank1: Vec<f64>,
    pub baseline_rank1: Vec<f64>,
    pub student_params: usize,
    pub teacher_params: usize,
}

impl StudentComparison {
    pub fn median_with_prompts(&self) -> f64 {
        median(&self.with_prompts_map)
    }

    pub fn median_baseline(&self) -> f64 {
        median(&self.baseline_map)
    }
}

/// Half-width student trained with and without the stage-1 prompts.
pub fn student_transfer(base: &RunConfig, seeds: &[u64]) -> Result<StudentComparison> {
    let mut cmp = StudentComparison {
        seeds: seeds.to_vec(),
        with_prompts_map: Vec::new(),
        baseline_map: Vec::new(),
        with_prompts_rank1: Vec::new(),
        baseline_rank1: Vec::new(),
        student_params: 0,
        teacher_params: 0,
    };
    for &seed in seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let exp = Experiment::prepare(&cfg)?;
        let mut log = TrainingLog::in_memory();
        let s1 = exp.stage1(&mut log)?;
        let runs = train_student(&exp.data, &cfg, &s1, &exp.text, &mut log)?;
        let with = evaluate_model(&runs.with_prompts, &exp.data, &cfg)?;
        let without = evaluate_model(&runs.baseline, &exp.data, &cfg)?;
        cmp.with_prompts_map.push(with.map);
        cmp.baseline_map.push(without.map);
        cmp.with_prompts_rank1.push(with.rank(1));
        cmp.baseline_rank1.push(without.rank(1));
        cmp.student_params = runs.with_prompts.encoder.deployed_param_count();
        cmp.teacher_params = exp.encoder.deployed_param_count();
    }
    Ok(cmp)
}
