//! CSV writers, row schemas and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{CliError, Result};

pub const ALIGNMENT_HEADER: &[&str] = &[
    "seed", "d", "L", "rank", "step", "alpha", "quad_form", "trace", "norm_sq", "estimator",
    "n_samples", "std_err",
];
pub const BOUNDS_HEADER: &[&str] = &[
    "seed", "d", "L", "rank", "rho", "tau", "kappa", "alpha_measured", "bound_interp",
    "bound_tight", "bound_nonwhite", "regime_ok",
];
pub const FORGETTING_HEADER: &[&str] = &[
    "seed", "d", "L", "rank", "step", "actual", "first", "second", "random_mean", "random_se",
    "alpha",
];
pub const CL_HEADER: &[&str] = &[
    "seed", "mode", "task", "step", "loss_old_min", "alpha", "forget_task2", "ACC", "BWT",
    "immACC", "eps_f", "eps_b",
];
pub const CL_SUMMARY_HEADER: &[&str] =
    &["seed", "mode", "mean_task_alpha", "mean_forgetting", "ACC", "BWT", "immACC"];
pub const CDF_HEADER: &[&str] = &["seed", "d", "L", "rank", "vector", "method", "t", "cdf"];
pub const CDF_MASS_HEADER: &[&str] =
    &["seed", "d", "L", "rank", "vector", "method", "threshold", "mass_top", "sup_diff"];

/// Shortest round-trip representation, so equal values print identically.
pub fn fmt_f(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub rank: usize,
    pub step: usize,
    pub alpha: f64,
    pub quad_form: f64,
    pub trace: f64,
    pub norm_sq: f64,
    pub estimator: &'static str,
    pub n_samples: usize,
    pub std_err: f64,
}

impl AlignmentRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.rank.to_string(),
            self.step.to_string(),
            fmt_f(self.alpha),
            fmt_f(self.quad_form),
            fmt_f(self.trace),
            fmt_f(self.norm_sq),
            self.estimator.to_string(),
            self.n_samples.to_string(),
            fmt_f(self.std_err),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub rank: usize,
    pub rho: f64,
    pub tau: f64,
    pub kappa: f64,
    pub alpha_measured: f64,
    pub bound_interp: f64,
    pub bound_tight: f64,
    pub bound_nonwhite: Option<f64>,
    pub regime_ok: bool,
}

impl BoundsRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.rank.to_string(),
            fmt_f(self.rho),
            fmt_f(self.tau),
            fmt_f(self.kappa),
            fmt_f(self.alpha_measured),
            fmt_f(self.bound_interp),
            fmt_f(self.bound_tight),
            self.bound_nonwhite.map(fmt_f).unwrap_or_default(),
            self.regime_ok.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRow {
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub rank: usize,
    pub step: usize,
    pub actual: f64,
    pub first: f64,
    pub second: f64,
    pub random_mean: f64,
    pub random_se: f64,
    pub alpha: f64,
}

impl ForgettingRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.rank.to_string(),
            self.step.to_string(),
            fmt_f(self.actual),
            fmt_f(self.first),
            fmt_f(self.second),
            fmt_f(self.random_mean),
            fmt_f(self.random_se),
            fmt_f(self.alpha),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClRow {
    pub seed: u64,
    pub mode: &'static str,
    /// 1-based index of the task being trained.
    pub task: usize,
    pub step: usize,
    pub loss_old_min: f64,
    pub alpha: f64,
    pub forget: f64,
    pub acc: f64,
    pub bwt: f64,
    pub imm_acc: f64,
    pub eps_f: f64,
    pub eps_b: f64,
}

impl ClRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.mode.to_string(),
            self.task.to_string(),
            self.step.to_string(),
            fmt_f(self.loss_old_min),
            fmt_f(self.alpha),
            fmt_f(self.forget),
            fmt_f(self.acc),
            fmt_f(self.bwt),
            fmt_f(self.imm_acc),
            fmt_f(self.eps_f),
            fmt_f(self.eps_b),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClSummaryRow {
    pub seed: u64,
    pub mode: &'static str,
    pub mean_task_alpha: f64,
    pub mean_forgetting: f64,
    pub acc: f64,
    pub bwt: f64,
    pub imm_acc: f64,
}

impl ClSummaryRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.mode.to_string(),
            fmt_f(self.mean_task_alpha),
            fmt_f(self.mean_forgetting),
            fmt_f(self.acc),
            fmt_f(self.bwt),
            fmt_f(self.imm_acc),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfRow {
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub rank: usize,
    pub vector: &'static str,
    pub method: &'static str,
    pub t: f64,
    pub cdf: f64,
}

impl CdfRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.rank.to_string(),
            self.vector.to_string(),
            self.method.to_string(),
            fmt_f(self.t),
            fmt_f(self.cdf),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfMassRow {
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub rank: usize,
    pub vector: &'static str,
    pub method: &'static str,
    pub threshold: f64,
    pub mass_top: f64,
    /// Sup-norm distance of this method's CDF from the exact one.
    pub sup_diff: f64,
}

impl CdfMassRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.d.to_string(),
            self.depth.to_string(),
            self.rank.to_string(),
            self.vector.to_string(),
            self.method.to_string(),
            fmt_f(self.threshold),
            fmt_f(self.mass_top),
            fmt_f(self.sup_diff),
        ]
    }
}

/// Write `header` and `records` to `path`, creating parent directories.
pub fn write_csv(path: &Path, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Sidecar manifest: provenance as comments, then the full config, so the
/// file doubles as a config for an exact rerun.
pub struct Manifest {
    command: String,
    started: u64,
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Manifest { command: command.to_string(), started: unix_now() }
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}.manifest"))
    }

    pub fn write(&self, dir: &Path, body: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = Self::path(dir, &self.command);
        self.write_at(&path, body, outputs)?;
        Ok(path)
    }

    pub fn write_at(&self, path: &Path, body: &str, outputs: &[PathBuf]) -> Result<()> {
        let mut s = String::new();
        s.push_str("# cl-lab run manifest\n");
        s.push_str(&format!("# command: {}\n", self.command));
        s.push_str(&format!("# version: {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("# started_unix: {}\n", self.started));
        s.push_str(&format!("# finished_unix: {}\n", unix_now()));
        for o in outputs {
            s.push_str(&format!("# output: {}\n", o.display()));
        }
        s.push_str(body);
        std::fs::write(path, s).map_err(|e| CliError::io(path, e))
    }
}
