use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Config sections that accept `--section.field value` overrides.
const SECTIONS: [&str; 6] = ["data", "encoder", "fusion", "loss", "train", "eval"];

#[derive(Debug, Parser)]
#[command(name = "pivl", version, about = "Part-informed visual-language person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel sections.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt tuning against the frozen encoders.
    Stage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encoder training against stage-1 prompts.
    Stage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `stage1`.
        #[arg(long)]
        prompts: PathBuf,
        /// Comma-separated subset of H, P, F; empty trains the baseline.
        #[arg(long, default_value = "")]
        flags: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval and consistency report for a stage-2 checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Within-part consistency scores only.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// B / B+H / B+P / B+P+F comparison over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to `eval.seeds`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Half-width student with and without the learned prompts.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query and gallery embeddings as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Stage1 { .. } => "stage1",
            Command::Stage2 { .. } => "stage2",
            Command::Eval { .. } => "eval",
            Command::Probe { .. } => "probe",
            Command::Ablate { .. } => "ablate",
            Command::Transfer { .. } => "transfer",
            Command::Export { .. } => "export",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Stage1 { common, .. }
            | Command::Stage2 { common, .. }
            | Command::Eval { common, .. }
            | Command::Probe { common, .. }
            | Command::Ablate { common, .. }
            | Command::Transfer { common, .. }
            | Command::Export { common, .. } => common,
        }
    }
}

/// Splits `--section.field value` and `--section.field=value` pairs out of
/// argv, leaving the rest for clap.
pub fn extract_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let is_override = key
            .split_once('.')
            .is_some_and(|(section, field)| SECTIONS.contains(&section) && !field.is_empty());
        if !is_override {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
        .collect()
}
