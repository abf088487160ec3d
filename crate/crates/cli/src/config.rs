//! Experiment configuration: a `key = value` file plus command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cl_lab_core::projections::ProjectionMode;

use crate::error::{CliError, Result};

/// Every config key with its help line, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("dim", "model width d (inputs and outputs are d-dimensional)"),
    ("depths", "comma list of depths L, each in [1, 12]"),
    ("ranks", "comma list of target ranks, each in [1, dim]"),
    ("n_samples", "samples per task (>= dim)"),
    ("trials", "independent trials per (depth, rank) cell"),
    ("lr", "learning rate for old-task and CL training"),
    ("l2", "weight decay coefficient"),
    ("epochs", "full-batch epochs per task"),
    ("momentum", "heavy-ball momentum in [0, 1)"),
    ("init_scale", "initial weights are N(0, init_scale^2 / dim)"),
    ("eps_forward", "forward projector energy threshold in (0, 1)"),
    ("eps_backward", "backward projector energy threshold in (0, 1)"),
    ("spectral_lambda", "spectral regularizer strength (0 disables)"),
    ("sigma_broaden", "CDF broadening as a fraction of the top eigenvalue (0 = default)"),
    ("seed", "master seed; every trial derives a child seed from it"),
    ("output_dir", "directory receiving CSVs, manifests and reports"),
    ("alpha_samples", "Haar rotations for the Monte-Carlo alignment estimate"),
    ("baseline_samples", "random perturbations in the forgetting baseline"),
    ("new_epochs", "new-task epochs recorded by the forgetting command"),
    ("new_lr", "new-task learning rate for the forgetting command"),
    ("record_every", "record every this many epochs (forgetting, cl-run)"),
    ("tasks", "tasks in a continual-learning sequence (>= 2)"),
    ("modes", "comma list from vanilla, forwardGP, forward+backGP"),
    ("lanczos_steps", "Lanczos steps for the cdf command (0 = dim_theta)"),
    ("cdf_points", "grid points per CDF curve"),
    ("power_steps", "steps recorded by the power-iter command"),
    ("power_lr", "learning rate for the power-iter command"),
    ("label_noise", "std of Gaussian noise added to synthetic labels"),
    ("noise_std", "whitening noise for IDX inputs"),
    ("mnist_dir", "directory with train-images-idx3-ubyte and train-labels-idx1-ubyte (empty = synthetic)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub depths: Vec<usize>,
    pub ranks: Vec<usize>,
    pub n_samples: usize,
    pub trials: usize,
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub init_scale: f64,
    pub eps_forward: f64,
    pub eps_backward: f64,
    pub spectral_lambda: f64,
    pub sigma_broaden: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub alpha_samples: usize,
    pub baseline_samples: usize,
    pub new_epochs: usize,
    pub new_lr: f64,
    pub record_every: usize,
    pub tasks: usize,
    pub modes: Vec<ProjectionMode>,
    pub lanczos_steps: usize,
    pub cdf_points: usize,
    pub power_steps: usize,
    pub power_lr: f64,
    pub label_noise: f64,
    pub noise_std: f64,
    pub mnist_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 32,
            depths: vec![1, 2, 4, 6],
            ranks: vec![1, 2, 4, 8, 16, 32],
            n_samples: 512,
            trials: 3,
            lr: 0.5,
            l2: 1e-3,
            epochs: 200,
            momentum: 0.0,
            init_scale: 1.0,
            eps_forward: 0.01,
            eps_backward: 0.01,
            spectral_lambda: 0.0,
            sigma_broaden: 0.0,
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            alpha_samples: 128,
            baseline_samples: 64,
            new_epochs: 50,
            new_lr: 0.05,
            record_every: 1,
            tasks: 3,
            modes: vec![
                ProjectionMode::Vanilla,
                ProjectionMode::Forward,
                ProjectionMode::ForwardBackward,
            ],
            lanczos_steps: 0,
            cdf_points: 200,
            power_steps: 10,
            power_lr: 0.01,
            label_noise: 0.0,
            noise_std: 0.01,
            mnist_dir: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key} = {value:?}: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| bad(key, value, e))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| bad(key, value, e)))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dim" => self.dim = parse_num(key, v)?,
            "depths" => self.depths = parse_list(key, v)?,
            "ranks" => self.ranks = parse_list(key, v)?,
            "n_samples" => self.n_samples = parse_num(key, v)?,
            "trials" => self.trials = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "l2" => self.l2 = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "init_scale" => self.init_scale = parse_num(key, v)?,
            "eps_forward" => self.eps_forward = parse_num(key, v)?,
            "eps_backward" => self.eps_backward = parse_num(key, v)?,
            "spectral_lambda" => self.spectral_lambda = parse_num(key, v)?,
            "sigma_broaden" => self.sigma_broaden = parse_num(key, v)?,
            "seed" => self.master_seed = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "alpha_samples" => self.alpha_samples = parse_num(key, v)?,
            "baseline_samples" => self.baseline_samples = parse_num(key, v)?,
            "new_epochs" => self.new_epochs = parse_num(key, v)?,
            "new_lr" => self.new_lr = parse_num(key, v)?,
            "record_every" => self.record_every = parse_num(key, v)?,
            "tasks" => self.tasks = parse_num(key, v)?,
            "modes" => {
                self.modes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| ProjectionMode::parse(s).ok_or_else(|| bad(key, value, "unknown mode")))
                    .collect::<Result<_>>()?
            }
            "lanczos_steps" => self.lanczos_steps = parse_num(key, v)?,
            "cdf_points" => self.cdf_points = parse_num(key, v)?,
            "power_steps" => self.power_steps = parse_num(key, v)?,
            "power_lr" => self.power_lr = parse_num(key, v)?,
            "label_noise" => self.label_noise = parse_num(key, v)?,
            "noise_std" => self.noise_std = parse_num(key, v)?,
            "mnist_dir" => self.mnist_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` document. Blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.dim == 0 {
            return fail("dim must be >= 1".into());
        }
        if self.depths.is_empty() || self.depths.iter().any(|l| !(1..=12).contains(l)) {
            return fail(format!("depths must be a non-empty subset of [1, 12], got {:?}", self.depths));
        }
        if self.ranks.is_empty() || self.ranks.iter().any(|r| *r == 0 || *r > self.dim) {
            return fail(format!("ranks must lie in [1, {}], got {:?}", self.dim, self.ranks));
        }
        if self.n_samples < self.dim {
            return fail(format!("n_samples {} must be >= dim {}", self.n_samples, self.dim));
        }
        if self.trials == 0 {
            return fail("trials must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("new_lr", self.new_lr), ("power_lr", self.power_lr), ("init_scale", self.init_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("l2", self.l2),
            ("spectral_lambda", self.spectral_lambda),
            ("sigma_broaden", self.sigma_broaden),
            ("label_noise", self.label_noise),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [("eps_forward", self.eps_forward), ("eps_backward", self.eps_backward)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("alpha_samples", self.alpha_samples),
            ("new_epochs", self.new_epochs),
            ("record_every", self.record_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.tasks < 2 {
            return fail(format!("tasks must be >= 2, got {}", self.tasks));
        }
        if self.modes.is_empty() {
            return fail("modes must not be empty".into());
        }
        if self.cdf_points < 2 {
            return fail("cdf_points must be >= 2".into());
        }
        if self.power_steps < 2 {
            return fail("power_steps must be >= 2".into());
        }
        Ok(())
    }

    /// Render as a config document that [`apply_str`](Self::apply_str) reads back.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("dim", self.dim.to_string());
        put("depths", join(&self.depths));
        put("ranks", join(&self.ranks));
        put("n_samples", self.n_samples.to_string());
        put("trials", self.trials.to_string());
        put("lr", self.lr.to_string());
        put("l2", self.l2.to_string());
        put("epochs", self.epochs.to_string());
        put("momentum", self.momentum.to_string());
        put("init_scale", self.init_scale.to_string());
        put("eps_forward", self.eps_forward.to_string());
        put("eps_backward", self.eps_backward.to_string());
        put("spectral_lambda", self.spectral_lambda.to_string());
        put("sigma_broaden", self.sigma_broaden.to_string());
        put("seed", self.master_seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("alpha_samples", self.alpha_samples.to_string());
        put("baseline_samples", self.baseline_samples.to_string());
        put("new_epochs", self.new_epochs.to_string());
        put("new_lr", self.new_lr.to_string());
        put("record_every", self.record_every.to_string());
        put("tasks", self.tasks.to_string());
        put("modes", self.modes.iter().map(|m| m.label()).collect::<Vec<_>>().join(","));
        put("lanczos_steps", self.lanczos_steps.to_string());
        put("cdf_points", self.cdf_points.to_string());
        put("power_steps", self.power_steps.to_string());
        put("power_lr", self.power_lr.to_string());
        put("label_noise", self.label_noise.to_string());
        put("noise_std", self.noise_std.to_string());
        put("mnist_dir", self.mnist_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        s
    }
}

/// Help text listing every config key.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (file `key = value`, `#` comments; flags override):\n");
    for (k, h) in KEYS {
        let _ = writeln!(s, "  {k:<18} {h}");
    }
    s
}
