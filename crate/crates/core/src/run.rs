//! Executes a configured study and writes its output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{ExperimentConfig, ResolvedConfig};
use crate::error::{Error, Result};
use crate::stability::{run_study, LevelRecord, NodeCounts, StabilityReport};

pub const OUTPUT_DIR_ENV: &str = "OED_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "oed-output";
pub const RATES_HEADER: [&str; 7] = [
    "N",
    "sup_utility_error",
    "sup_l2_distance",
    "argmax_d1",
    "argmax_d2",
    "U_N_at_argmax",
    "K_estimate",
];
pub const SURFACE_HEADER: [&str; 5] = ["d1", "d2", "U", "U_N", "abs_err"];

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    status: &'a str,
    study: &'a str,
    crate_name: &'a str,
    crate_version: &'a str,
    config: &'a ResolvedConfig,
    wall_clock_seconds: f64,
    node_counts: Option<&'a NodeCounts>,
    surrogate_levels: Vec<(usize, f64, String)>,
    failed_checks: Vec<&'a str>,
    error: Option<String>,
    files: Vec<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub report: Option<StabilityReport>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.report.as_ref().is_some_and(StabilityReport::passed)
    }
}

/// Output directory: explicit argument, then the environment override, then
/// the config value, then the default.
pub fn output_dir(explicit: Option<&Path>, cfg: &ResolvedConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("cannot write {}: {e}", path.display()))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn coord(d: &[f64], k: usize) -> String {
    d.get(k).map(|v| fmt(*v)).unwrap_or_default()
}

fn level_label(level: &LevelRecord) -> String {
    if level.n.fract() == 0.0 {
        format!("{}", level.n as u64)
    } else {
        fmt(level.n)
    }
}

/// `rates.csv` content for a report.
pub fn rates_csv(report: &StabilityReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(RATES_HEADER).map_err(err)?;
    for l in &report.levels {
        w.write_record([
            level_label(l),
            fmt(l.sup_utility_error),
            fmt(l.sup_l2_distance),
            coord(&l.argmax_design, 0),
            coord(&l.argmax_design, 1),
            fmt(l.u_n_at_argmax),
            l.k_estimate.map(fmt).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// `utility_surface_N<k>.csv` content for one level.
pub fn surface_csv(level: &LevelRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(SURFACE_HEADER).map_err(err)?;
    for r in &level.designs {
        w.write_record([
            coord(&r.design, 0),
            coord(&r.design, 1),
            fmt(r.u),
            fmt(r.u_n),
            fmt(r.abs_err),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

fn write(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    files.push(name.to_string());
    Ok(())
}

fn study_in_pool(cfg: &ResolvedConfig) -> Result<StabilityReport> {
    let setup = cfg.setup()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_study(&setup))
}

/// Runs a resolved configuration and writes `report.json`, `rates.csv`, one
/// surface file per level and `MANIFEST.json` into `dir`. Files produced
/// before a failure are kept; the manifest then carries `FAILED`.
pub fn run_resolved(cfg: &ResolvedConfig, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let start = Instant::now();
    let mut files = Vec::new();
    let result = study_in_pool(cfg);
    let (report, mut error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(r) = &report {
        let written = (|| -> Result<()> {
            let json = serde_json::to_vec_pretty(r).map_err(|e| Error::Config(e.to_string()))?;
            write(dir, "report.json", &json, &mut files)?;
            write(dir, "rates.csv", &rates_csv(r)?, &mut files)?;
            for l in &r.levels {
                let name = format!("utility_surface_N{}.csv", level_label(l));
                write(dir, &name, &surface_csv(l)?, &mut files)?;
            }
            Ok(())
        })();
        if let Err(e) = written {
            error = Some(e.to_string());
        }
    }
    let passed = error.is_none() && report.as_ref().is_some_and(StabilityReport::passed);
    let manifest = Manifest {
        status: if passed { "OK" } else { "FAILED" },
        study: cfg.study.name(),
        crate_name: env!("CARGO_PKG_NAME"),
        crate_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        node_counts: report.as_ref().map(|r| &r.node_counts),
        surrogate_levels: report
            .as_ref()
            .map(|r| r.levels.iter().map(|l| (l.level, l.n, l.surrogate_tag.clone())).collect())
            .unwrap_or_default(),
        failed_checks: report
            .as_ref()
            .map(|r| r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect())
            .unwrap_or_default(),
        error: error.clone().or_else(|| {
            report.as_ref().filter(|r| !r.failures.is_empty()).map(|r| {
                r.failures
                    .iter()
                    .map(|f| format!("level {}: {}", f.level, f.error))
                    .collect::<Vec<_>>()
                    .join("; ")
            })
        }),
        files: files.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("MANIFEST.json");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(RunOutcome {
        output_dir: dir.to_path_buf(),
        report,
        error,
    })
}

/// Resolves `cfg`, picks the output directory and runs it.
pub fn run(cfg: &ExperimentConfig, explicit_dir: Option<&Path>) -> Result<RunOutcome> {
    let resolved = cfg.resolve()?;
    let dir = output_dir(explicit_dir, &resolved);
    run_resolved(&resolved, &dir)
}
