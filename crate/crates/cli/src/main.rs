mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use pivl_core::RunConfig;

use args::{extract_overrides, Cli};
use manifest::{digests, RunManifest};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<pivl_core::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        Some(_) => EXIT_RUNTIME,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_RUNTIME,
        None => EXIT_VALIDATION,
    }
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let common = cli.command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("PIVL_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|e| pivl_core::Error::Config(format!("PIVL_SEED `{seed}`: {e}")))?;
    }
    let cfg = cfg.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let started = chrono::Utc::now().to_rfc3339();
    let cfg = load_config(&cli, &overrides)?;
    let workers = cli.command.common().workers.max(1);
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().ok();

    let outcome = commands::run(&cli.command, cfg.clone())?;
    let mut inputs = outcome.inputs;
    if let Some(p) = &cli.command.common().config {
        inputs.push(p.clone());
    }
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        inputs: digests(&inputs)?,
        artifacts: digests(&outcome.artifacts)?,
    };
    manifest.write(&outcome.out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let (argv, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
