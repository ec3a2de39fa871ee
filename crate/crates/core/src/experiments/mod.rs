//! Config-driven experiment orchestration: TOML configs, run manifests and tidy plot data.

mod runners;

pub use runners::*;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{QsaError, Result};

/// Environment variable naming the directory under which runs are written.
pub const OUTPUT_ROOT_ENV: &str = "QSA_OUTPUT_ROOT";
/// Manifest file name inside a run directory.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Config snapshot file name inside a run directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

/// Top-level experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Use the large replicate counts where they differ from the desk-scale defaults.
    #[serde(default)]
    pub full: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    LinearBiasSweep(LinearBiasSweep),
    RastriginQsgd(RastriginQsgd),
    RastriginVanishingVsFixed(VanishingVsFixed),
    CamelTracking(CamelTracking),
    LyapunovSweep(LyapunovSweep),
    MarkovSaBias(MarkovSaBias),
    PmfVerify(PmfVerify),
    Solidarity(Solidarity),
    OdeAtInfinity(OdeAtInfinity),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::LinearBiasSweep(_) => "linear-bias-sweep",
            Experiment::RastriginQsgd(_) => "rastrigin-qsgd",
            Experiment::RastriginVanishingVsFixed(_) => "rastrigin-vanishing-vs-fixed",
            Experiment::CamelTracking(_) => "camel-tracking",
            Experiment::LyapunovSweep(_) => "lyapunov-sweep",
            Experiment::MarkovSaBias(_) => "markov-sa-bias",
            Experiment::PmfVerify(_) => "pmf-verify",
            Experiment::Solidarity(_) => "solidarity",
            Experiment::OdeAtInfinity(_) => "ode-at-infinity",
        }
    }
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, experiment: Experiment) -> Self {
        Self { name: name.into(), seed: 0, full: false, output_dir: None, experiment }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| QsaError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s).map_err(|e| match e {
            QsaError::ConfigInvalid(msg) => QsaError::ConfigInvalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QsaError::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(QsaError::ConfigInvalid("field `name` must be non-empty".into()));
        }
        if self.name.contains(['/', '\\']) {
            return Err(QsaError::ConfigInvalid("field `name` must not contain path separators".into()));
        }
        self.experiment.validate().map_err(|e| match e {
            QsaError::ConfigInvalid(m) => QsaError::ConfigInvalid(format!("experiment.{m}")),
            other => QsaError::ConfigInvalid(format!("experiment: {other}")),
        })
    }

    /// Explicit `output_dir`, else `$QSA_OUTPUT_ROOT/<name>`, else `qsa-output/<name>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("qsa-output"));
        root.join(&self.name)
    }
}

/// One named pass/fail comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value <= bound, value, threshold: format!("<= {bound}") }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value >= bound, value, threshold: format!(">= {bound}") }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), passed: (lo..=hi).contains(&value), value, threshold: format!("in [{lo}, {hi}]") }
    }

    pub fn flag(name: impl Into<String>, passed: bool) -> Self {
        Self { name: name.into(), passed, value: if passed { 1.0 } else { 0.0 }, threshold: "true".into() }
    }
}

/// A file written by a run, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub role: String,
    pub path: String,
}

/// Points a plot series at two columns of an output CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesRef {
    pub series: String,
    pub file: String,
    pub x: String,
    pub y: String,
}

/// What a runner hands back to the orchestrator.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<OutputFile>,
    pub series: Vec<SeriesRef>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
}

impl Outcome {
    fn file(&mut self, role: impl Into<String>, path: impl Into<String>) {
        self.outputs.push(OutputFile { role: role.into(), path: path.into() });
    }

    fn series(&mut self, series: impl Into<String>, file: &str, x: &str, y: &str) {
        self.series.push(SeriesRef { series: series.into(), file: file.into(), x: x.into(), y: y.into() });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub name: String,
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub outputs: Vec<OutputFile>,
    pub series: Vec<SeriesRef>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunManifest {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| QsaError::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| QsaError::Io(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Plain numeric table written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-replicate seed derived deterministically from a base seed.
pub fn seed_fanout(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Runs a config into `dir`, writing outputs, the config snapshot and the manifest.
pub fn run_config_in(config: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let ctx = RunContext { seed: config.seed, full: config.full };
    let mut outcome = match &config.experiment {
        Experiment::LinearBiasSweep(p) => p.run(&ctx)?.report(dir)?,
        Experiment::RastriginQsgd(p) => p.run(&ctx)?.report(dir)?,
        Experiment::RastriginVanishingVsFixed(p) => p.run(&ctx)?.report(dir)?,
        Experiment::CamelTracking(p) => p.run(&ctx)?.report(dir)?,
        Experiment::LyapunovSweep(p) => p.run(&ctx)?.report(dir)?,
        Experiment::MarkovSaBias(p) => p.run(&ctx)?.report(dir)?,
        Experiment::PmfVerify(p) => p.run(&ctx)?.report(dir)?,
        Experiment::Solidarity(p) => p.run(&ctx)?.report(dir)?,
        Experiment::OdeAtInfinity(p) => p.run(&ctx)?.report(dir)?,
    };
    std::fs::write(dir.join(SNAPSHOT_FILE), config.to_toml_string()?)?;
    outcome.file("config-snapshot", SNAPSHOT_FILE);
    let manifest = RunManifest {
        experiment: config.experiment.kind().to_string(),
        name: config.name.clone(),
        config: config.clone(),
        output_dir: dir.to_path_buf(),
        outputs: outcome.outputs,
        series: outcome.series,
        checks: outcome.checks,
        summary: outcome.summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads a config file and runs it into its resolved output directory.
pub fn run_experiment(config_path: &Path) -> Result<RunManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir();
    run_config_in(&cfg, &dir)
}

/// Re-runs a manifest's config snapshot into a scratch directory, recomputes its checks
/// and adds one check per data file that the rerun reproduces byte for byte.
pub fn verify_manifest(manifest: &RunManifest) -> Result<Vec<Check>> {
    let scratch = manifest.output_dir.join(".verify");
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    let rerun = run_config_in(&manifest.config, &scratch);
    let result = rerun.and_then(|rerun| {
        let mut checks = rerun.checks.clone();
        for out in manifest.outputs.iter().filter(|o| o.role != "config-snapshot") {
            let a = std::fs::read(manifest.output_dir.join(&out.path))?;
            let b = std::fs::read(scratch.join(&out.path))?;
            checks.push(Check::flag(format!("reproducible:{}", out.path), a == b));
        }
        Ok(checks)
    });
    let _ = std::fs::remove_dir_all(&scratch);
    result
}

fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let s = std::fs::read_to_string(path)?;
    let mut lines = s.lines();
    let header = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

/// Long-format `experiment,series,x,y` table over every series the manifest references.
pub fn emit_plotdata(manifest: &RunManifest, mut w: impl Write) -> Result<()> {
    writeln!(w, "experiment,series,x,y")?;
    let mut cache: BTreeMap<String, (Vec<String>, Vec<Vec<String>>)> = BTreeMap::new();
    for s in &manifest.series {
        if !cache.contains_key(&s.file) {
            cache.insert(s.file.clone(), read_columns(&manifest.output_dir.join(&s.file))?);
        }
        let (header, rows) = &cache[&s.file];
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| QsaError::ConfigInvalid(format!("{} has no column {name}", s.file)))
        };
        let (ix, iy) = (col(&s.x)?, col(&s.y)?);
        for row in rows {
            writeln!(w, "{},{},{},{}", manifest.experiment, s.series, row[ix], row[iy])?;
        }
    }
    Ok(())
}

/// Shared knobs every runner sees.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunContext {
    pub seed: u64,
    pub full: bool,
}
