//! On-disk dataset layout: `<root>/<split>/` holds `NNNNN.png` (RGB),
//! `NNNNN_parsing.png` (8-bit part ids) and `manifest.jsonl`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::dataset::DatasetSplit;
use super::render::SyntheticSample;
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "query", "gallery"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub parsing: String,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetInfo {
    num_train_ids: usize,
    height: usize,
    width: usize,
}

fn split_samples<'a>(split: &'a DatasetSplit, name: &str) -> &'a [SyntheticSample] {
    match name {
        "train" => &split.train,
        "query" => &split.query,
        _ => &split.gallery,
    }
}

/// Writes the dataset and returns every file produced.
pub fn save_dataset(split: &DatasetSplit, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let first = split
        .train
        .first()
        .ok_or_else(|| Error::Precondition("empty train split".into()))?;
    fs::create_dir_all(root)?;
    let info = DatasetInfo {
        num_train_ids: split.num_train_ids,
        height: first.height,
        width: first.width,
    };
    let info_path = root.join("dataset.json");
    fs::write(&info_path, serde_json::to_vec_pretty(&info)?)?;
    written.push(info_path);

    for name in SPLITS {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let manifest_path = dir.join("manifest.jsonl");
        let mut manifest = BufWriter::new(File::create(&manifest_path)?);
        for (i, s) in split_samples(split, name).iter().enumerate() {
            let file = format!("{i:05}.png");
            let parsing = format!("{i:05}_parsing.png");
            let rgb: Vec<u8> = s.image.iter().map(|v| (v * 255.0).round() as u8).collect();
            RgbImage::from_raw(s.width as u32, s.height as u32, rgb)
                .expect("buffer matches dims")
                .save(dir.join(&file))?;
            GrayImage::from_raw(s.width as u32, s.height as u32, s.parsing.clone())
                .expect("buffer matches dims")
                .save(dir.join(&parsing))?;
            written.push(dir.join(&file));
            written.push(dir.join(&parsing));
            let entry = ManifestEntry {
                file,
                parsing,
                identity: s.identity,
                camera: s.camera,
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        written.push(manifest_path);
    }
    Ok(written)
}

pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    let info: DatasetInfo = serde_json::from_slice(&fs::read(root.join("dataset.json"))?)?;
    let mut parts: Vec<Vec<SyntheticSample>> = Vec::new();
    for name in SPLITS {
        let dir = root.join(name);
        let reader = BufReader::new(File::open(dir.join("manifest.jsonl"))?);
        let mut samples = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)?;
            let rgb = image::open(dir.join(&entry.file))?.to_rgb8();
            let parsing = image::open(dir.join(&entry.parsing))?.to_luma8();
            if rgb.dimensions() != (info.width as u32, info.height as u32)
                || parsing.dimensions() != rgb.dimensions()
            {
                return Err(Error::Shape(format!(
                    "{}: unexpected image dims {:?}",
                    entry.file,
                    rgb.dimensions()
                )));
            }
            samples.push(SyntheticSample {
                height: info.height,
                width: info.width,
                image: rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                parsing: parsing.into_raw(),
                identity: entry.identity,
                camera: entry.camera,
            });
        }
        parts.push(samples);
    }
    let gallery = parts.pop().unwrap_or_default();
    let query = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let split = DatasetSplit {
        train,
        query,
        gallery,
        num_train_ids: info.num_train_ids,
    };
    split.check_invariants()?;
    Ok(split)
}
