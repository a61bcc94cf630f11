//! Two-stage training: prompt tuning against frozen encoders, then encoder
//! training against frozen prompts.

mod augment;
mod checkpoint;
mod optim;
mod sampler;
mod stage1;
mod stage2;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use augment::{augment, AugmentConfig, AugmentedSample};
pub use checkpoint::{load_stage2_checkpoint, save_stage2_checkpoint, CheckpointMeta, Stage2Checkpoint};
pub use optim::{cosine_lr, stage2_lr, Adam};
pub use sampler::{pk_sample, BatchBundle};
pub use stage1::{run_stage1, Stage1Output};
pub use stage2::{run_stage2, train_student, Stage2Model, Stage2Options, StudentRuns};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_id_epochs: usize,
    pub stage1_part_epochs: usize,
    pub stage2_epochs: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lr_stage1: f64,
    pub lr_stage2_conv: f64,
    pub lr_stage2_vit: f64,
    /// Stage-2 decay points as fractions of the epoch budget.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub warmup_fraction: f64,
    /// Learnable context tokens per identity prompt.
    pub context_tokens: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_id_epochs: 150,
            stage1_part_epochs: 50,
            stage2_epochs: 48,
            p: 4,
            k: 4,
            lr_stage1: 3.5e-4,
            lr_stage2_conv: 3.5e-4,
            lr_stage2_vit: 5e-6,
            milestones: vec![1.0 / 3.0, 7.0 / 12.0],
            decay: 0.1,
            warmup_fraction: 0.1,
            context_tokens: 4,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.p >= 2, Config, "P must be at least 2, got {}", self.p);
        ensure!(self.k >= 2, Config, "K must be at least 2, got {}", self.k);
        ensure!(
            self.lr_stage1 > 0.0 && self.lr_stage2_conv > 0.0 && self.lr_stage2_vit > 0.0,
            Config,
            "learning rates must be positive"
        );
        ensure!(
            self.milestones.windows(2).all(|w| w[0] < w[1]),
            Config,
            "milestones must be strictly increasing"
        );
        ensure!(
            self.milestones.iter().all(|&m| m > 0.0 && m < 1.0),
            Config,
            "milestones are fractions in (0, 1)"
        );
        ensure!(
            (0.0..1.0).contains(&self.warmup_fraction),
            Config,
            "warmup_fraction must lie in [0, 1)"
        );
        ensure!(self.decay > 0.0 && self.decay <= 1.0, Config, "decay must lie in (0, 1]");
        self.augment.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Stage-2 variant switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Parsing-label-only part prompts.
    pub h: bool,
    /// Identity-aware part prompts.
    pub p: bool,
    /// Hierarchical fusion for the alignment map.
    pub f: bool,
}

impl AblationFlags {
    pub const B: Self = Self { h: false, p: false, f: false };
    pub const BH: Self = Self { h: true, p: false, f: false };
    pub const BP: Self = Self { h: false, p: true, f: false };
    pub const BPF: Self = Self { h: false, p: true, f: true };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !(self.h && self.p),
            Config,
            "flags H and P select different prompt modes and cannot be combined"
        );
        Ok(())
    }

    /// Whether the alignment loss is active.
    pub fn aligns(&self) -> bool {
        self.h || self.p
    }

    pub fn label(&self) -> String {
        let mut s = String::from("B");
        for (on, c) in [(self.h, "+H"), (self.p, "+P"), (self.f, "+F")] {
            if on {
                s.push_str(c);
            }
        }
        s
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    /// Parses comma-separated letters such as `P,F`; empty means the baseline.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "H" => flags.h = true,
                "P" => flags.p = true,
                "F" => flags.f = true,
                "B" => {}
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            }
        }
        flags.validate()?;
        Ok(flags)
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: String,
    #[serde(flatten)]
    pub terms: std::collections::BTreeMap<String, f64>,
}

/// Per-step loss values, kept in memory and optionally mirrored to JSON lines.
#[derive(Debug, Default)]
pub struct TrainingLog {
    entries: Vec<LogEntry>,
    file: Option<(PathBuf, File)>,
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Vec::new(),
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn record(&mut self, step: usize, stage: &str, terms: &[(&str, f64)]) -> Result<()> {
        let entry = LogEntry {
            step,
            stage: stage.to_string(),
            terms: terms.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        if let Some((_, f)) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}
