use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pivl_core::eval::{
    ablation_harness, embed_samples, evaluate_model, export_embeddings_csv, part_consistency_probe, probe_cells,
    student_transfer, Experiment, ReportJson,
};
use pivl_core::pipeline::{load_stage2_checkpoint, save_stage2_checkpoint, AblationFlags, Stage1Output, TrainingLog};
use pivl_core::synthgen::{generate_dataset, load_dataset, save_dataset, DatasetSplit};
use pivl_core::RunConfig;

use crate::args::{parse_seeds, Command};

/// What a command read and wrote, for the run manifest.
pub struct Outcome {
    pub out_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}

/// Loads a dataset and pins the image size in `cfg` to match it.
fn dataset(cfg: &mut RunConfig, root: &Path) -> Result<DatasetSplit> {
    let data = load_dataset(root).with_context(|| format!("loading dataset from {}", root.display()))?;
    if let Some(s) = data.train.first().or(data.query.first()) {
        cfg.data.height = s.height;
        cfg.data.width = s.width;
    }
    Ok(data)
}

fn seeds_or_default(seeds: &Option<String>, cfg: &RunConfig) -> Result<Vec<u64>> {
    match seeds {
        Some(s) => Ok(parse_seeds(s).map_err(|e| pivl_core::Error::Config(e))?),
        None => Ok(cfg.eval.seeds.clone()),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cmd: &Command, mut cfg: RunConfig) -> Result<Outcome> {
    match cmd {
        Command::Gen { out, .. } => {
            let data = generate_dataset(&cfg.data, cfg.seed)?;
            let artifacts = save_dataset(&data, out)?;
            eprintln!(
                "wrote {} train / {} query / {} gallery images to {}",
                data.train.len(),
                data.query.len(),
                data.gallery.len(),
                out.display()
            );
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![],
                artifacts,
            })
        }
        Command::Stage1 { data: root, out, .. } => {
            let data = dataset(&mut cfg, root)?;
            fs::create_dir_all(out)?;
            let exp = Experiment::with_data(&cfg, data)?;
            let log_path = out.join("stage1.log.jsonl");
            let mut log = TrainingLog::to_file(&log_path)?;
            let s1 = exp.stage1(&mut log)?;
            let mut artifacts = s1.save(out)?;
            artifacts.push(log_path);
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![root.clone()],
                artifacts,
            })
        }
        Command::Stage2 {
            data: root,
            prompts,
            flags,
            out,
            ..
        } => {
            let flags: AblationFlags = flags.parse()?;
            flags.validate()?;
            let data = dataset(&mut cfg, root)?;
            let s1 = Stage1Output::load(prompts)?;
            fs::create_dir_all(out)?;
            let exp = Experiment::with_data(&cfg, data)?;
            let log_path = out.join("stage2.log.jsonl");
            let mut log = TrainingLog::to_file(&log_path)?;
            let model = exp.stage2(&s1, flags, &mut log)?;
            let mut artifacts = save_stage2_checkpoint(out, &model, &cfg, "stage2")?;
            artifacts.push(log_path);
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![root.clone(), prompts.clone()],
                artifacts,
            })
        }
        Command::Eval {
            checkpoint,
            data: root,
            report,
            ..
        } => {
            let (model, meta) = load_stage2_checkpoint(checkpoint)?;
            let mut cfg = meta.config;
            let data = dataset(&mut cfg, root)?;
            let r = evaluate_model(&model, &data, &cfg)?;
            let json = ReportJson::new(&r, &cfg);
            println!("mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}", r.map, r.rank(1), r.rank(5), r.rank(10));
            Ok(Outcome {
                out_dir: parent_dir(report),
                inputs: vec![checkpoint.clone(), root.clone()],
                artifacts: vec![write_json(report, &json)?],
            })
        }
        Command::Probe {
            checkpoint,
            data: root,
            out,
            ..
        } => {
            let (model, meta) = load_stage2_checkpoint(checkpoint)?;
            let mut cfg = meta.config;
            let data = dataset(&mut cfg, root)?;
            let test: Vec<_> = data.query.iter().chain(&data.gallery).cloned().collect();
            let cells = probe_cells(&model, &test)?;
            let scores = part_consistency_probe(&cells, cfg.eval.probe_folds, cfg.eval.probe_ridge, cfg.seed)?;
            println!(
                "intra {:.4}  inter {:.4}  probe acc {:.4}",
                scores.intra_part_sim, scores.inter_part_sim, scores.part_probe_acc
            );
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![checkpoint.clone(), root.clone()],
                artifacts: vec![write_json(&out.join("consistency.json"), &scores)?],
            })
        }
        Command::Ablate { seeds, out, .. } => {
            let seeds = seeds_or_default(seeds, &cfg)?;
            let table = ablation_harness(&cfg, &seeds, |variant, r| {
                eprintln!("{variant:<8} seed {:<3} mAP {:.4}  acc {:.4}", r.seed, r.map, r.probe_acc);
            })?;
            for row in &table.rows {
                println!(
                    "{:<8} mAP {:.4} (Δ {:+.4})  R1 {:.4}  intra {:.4}  inter {:.4}  acc {:.4}",
                    row.variant, row.map, row.delta_map, row.rank1, row.intra_part_sim, row.inter_part_sim, row.probe_acc
                );
            }
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![],
                artifacts: vec![write_json(&out.join("ablation.json"), &table)?],
            })
        }
        Command::Transfer { seeds, out, .. } => {
            let seeds = seeds_or_default(seeds, &cfg)?;
            let cmp = student_transfer(&cfg, &seeds)?;
            println!(
                "student with prompts mAP {:.4}  without {:.4}  ({} vs {} teacher params)",
                cmp.median_with_prompts(),
                cmp.median_baseline(),
                cmp.student_params,
                cmp.teacher_params
            );
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![],
                artifacts: vec![write_json(&out.join("transfer.json"), &cmp)?],
            })
        }
        Command::Export {
            checkpoint,
            data: root,
            out,
            ..
        } => {
            let (model, meta) = load_stage2_checkpoint(checkpoint)?;
            let mut cfg = meta.config;
            let data = dataset(&mut cfg, root)?;
            fs::create_dir_all(out)?;
            let mut artifacts = Vec::new();
            for (name, samples) in [("query", &data.query), ("gallery", &data.gallery)] {
                let path = out.join(format!("{name}.csv"));
                export_embeddings_csv(&embed_samples(&model.encoder, samples)?, &path)?;
                artifacts.push(path);
            }
            Ok(Outcome {
                out_dir: out.clone(),
                inputs: vec![checkpoint.clone(), root.clone()],
                artifacts,
            })
        }
    }
}
