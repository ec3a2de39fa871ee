use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qsa_core::experiments::{
    emit_plotdata, run_config_in, verify_manifest, Check, ExperimentConfig, RunManifest, OUTPUT_ROOT_ENV,
};

/// Run quasi-stochastic approximation experiments from TOML configs.
#[derive(Parser)]
#[command(name = "qsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSV outputs plus a manifest.
    Run {
        config: PathBuf,
        /// Use the large replicate counts.
        #[arg(long)]
        full: bool,
        /// Override the output directory.
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
        /// Root for run directories when the config sets none.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output_root: Option<PathBuf>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run a manifest's config snapshot and recheck it, including byte-identical outputs.
    Verify { manifest: PathBuf },
    /// Write long-format `experiment,series,x,y` CSV for a finished run.
    Plotdata {
        manifest: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}  value={:.6e}  threshold {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", checks.len());
    passed == checks.len()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::Run { config, full, output_dir, output_root, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.full |= full;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = Some(d);
            }
            let dir = match (&cfg.output_dir, output_root) {
                (Some(d), _) => d.clone(),
                (None, Some(root)) => root.join(&cfg.name),
                (None, None) => cfg.resolve_output_dir(),
            };
            let manifest = run_config_in(&cfg, &dir).with_context(|| format!("running {}", config.display()))?;
            println!("{} ({}) -> {}  [{:.1}s]", manifest.name, manifest.experiment, dir.display(), manifest.wall_clock_seconds);
            Ok(print_checks(&manifest.checks))
        }
        Command::Verify { manifest } => {
            let m = RunManifest::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let checks = verify_manifest(&m)?;
            Ok(print_checks(&checks))
        }
        Command::Plotdata { manifest, output } => {
            let m = RunManifest::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let w: Box<dyn Write> = match output {
                Some(p) => Box::new(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            emit_plotdata(&m, w)?;
            Ok(true)
        }
    }
}
