//! Experiment drivers shared by the binary and the acceptance suite.

use std::path::{Path, PathBuf};

use cl_lab_core::bounds::check_bounds;
use cl_lab_core::curvature::{
    expected_alpha_monte_carlo, hessian_full, hessian_trace_closed, lanczos, mass_above,
    projection_cdf, top_trace_threshold, CurvatureCtx, RitzSpectrum,
};
use cl_lab_core::data::{
    load_idx, load_idx_labels, rank_controlled_task, rotate_task, save_task, synth_teacher_task,
    Task,
};
use cl_lab_core::dln::{grad, train, DlnParams, TrainConfig, TrainLog};
use cl_lab_core::forgetting::{decompose, power_iteration_trace};
use cl_lab_core::linalg::{erank_of_powered_spectrum, singular_values};
use cl_lab_core::projections::{
    cl_metrics, cl_run, train_projected, ClConfig, ClResult, ProjectionMode, ProjectorSet,
};
use cl_lab_core::rng::{child_seed, rng_from_seed, LabRng};
use cl_lab_core::stats::median;
use cl_lab_core::{LabError, Mat};
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::output::*;

pub const THREADS_ENV: &str = "CL_LAB_THREADS";

/// Where old-task data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic,
    Idx { raw: Mat, classes: Vec<usize> },
}

impl DataSource {
    /// IDX files under `mnist_dir` when present, synthetic teacher tasks otherwise.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let Some(dir) = &cfg.mnist_dir else {
            return Ok(DataSource::Synthetic);
        };
        let img = dir.join("train-images-idx3-ubyte");
        let lab = dir.join("train-labels-idx1-ubyte");
        if !img.is_file() || !lab.is_file() {
            warn!("IDX files not found under {}; using synthetic teacher tasks", dir.display());
            return Ok(DataSource::Synthetic);
        }
        let raw = load_idx(&img)?;
        let classes = load_idx_labels(&lab)?;
        let n = cfg.n_samples.min(raw.ncols()).min(classes.len());
        Ok(DataSource::Idx {
            raw: raw.columns(0, n).into_owned(),
            classes: classes[..n].to_vec(),
        })
    }

    pub fn task(&self, cfg: &ExperimentConfig, rank: usize, rng: &mut LabRng) -> Result<Task> {
        Ok(match self {
            DataSource::Synthetic => {
                synth_teacher_task(cfg.dim, cfg.n_samples, rank, cfg.label_noise, rng)?
            }
            DataSource::Idx { raw, classes } => {
                rank_controlled_task(raw, classes, cfg.dim, rank, cfg.noise_std, rng)?
            }
        })
    }
}

/// One cell of the (depth, rank, trial) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Job {
    pub depth: usize,
    pub rank: usize,
    pub trial: usize,
}

impl Job {
    /// Child seed that depends only on `(depth, rank, trial)`, not on list order.
    pub fn seed(&self, master: u64) -> u64 {
        let s = child_seed(master, self.depth as u64);
        let s = child_seed(s, self.rank as u64);
        child_seed(s, self.trial as u64)
    }
}

/// Grid jobs sorted by `(depth, rank, trial)`.
pub fn grid_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut depths = cfg.depths.clone();
    depths.sort_unstable();
    depths.dedup();
    let mut ranks = cfg.ranks.clone();
    ranks.sort_unstable();
    ranks.dedup();
    let mut jobs = Vec::new();
    for &depth in &depths {
        for &rank in &ranks {
            for trial in 0..cfg.trials {
                jobs.push(Job { depth, rank, trial });
            }
        }
    }
    jobs
}

/// Worker count from `CL_LAB_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Run `f` over `jobs` in parallel. Failed jobs are logged and dropped;
/// the result keeps the order of `jobs`.
pub fn run_jobs<J, T, F>(jobs: &[J], f: F) -> Result<Vec<(J, T)>>
where
    J: Copy + Send + Sync + std::fmt::Debug,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    let results: Vec<(J, Result<T>)> = pool.install(|| jobs.par_iter().map(|j| (*j, f(j))).collect());
    let mut ok = Vec::with_capacity(results.len());
    for (j, r) in results {
        match r {
            Ok(v) => ok.push((j, v)),
            Err(e) => warn!("trial {j:?} failed: {e}"),
        }
    }
    if ok.is_empty() && !jobs.is_empty() {
        return Err(CliError::AllTrialsFailed(jobs.len()));
    }
    Ok(ok)
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        lr: cfg.lr,
        l2: cfg.l2,
        epochs: cfg.epochs,
        momentum: cfg.momentum,
        ..Default::default()
    }
}

/// A model trained on its old task, plus the trial's generator for later draws.
pub struct Trained {
    pub seed: u64,
    pub task: Task,
    pub params: DlnParams,
    pub log: TrainLog,
    pub rng: LabRng,
}

pub fn train_old(cfg: &ExperimentConfig, src: &DataSource, job: &Job) -> Result<Trained> {
    let seed = job.seed(cfg.master_seed);
    let mut rng = rng_from_seed(seed);
    let task = src.task(cfg, job.rank, &mut rng)?;
    let p0 = DlnParams::random_init(cfg.dim, job.depth, cfg.init_scale, &mut rng);
    let (params, log) = train(&p0, &task, &train_config(cfg))?;
    Ok(Trained { seed, task, params, log, rng })
}

/// Phase-transition trial: Monte-Carlo alignment and bounds of a trained model.
pub fn phase_trial(cfg: &ExperimentConfig, src: &DataSource, job: &Job) -> Result<(AlignmentRow, BoundsRow)> {
    let mut tr = train_old(cfg, src, job)?;
    let rec = expected_alpha_monte_carlo(&tr.params, &tr.task, cfg.alpha_samples, &mut tr.rng)?;
    let (n_samples, std_err) = match rec.estimator {
        cl_lab_core::curvature::Estimator::MonteCarlo { n_samples, std_err } => (n_samples, std_err),
        cl_lab_core::curvature::Estimator::Deterministic => (1, 0.0),
    };
    let b = check_bounds(&tr.params, &tr.task, Some(rec.alpha))?;
    let align = AlignmentRow {
        seed: tr.seed,
        d: cfg.dim,
        depth: job.depth,
        rank: job.rank,
        step: 0,
        alpha: rec.alpha,
        quad_form: rec.quad_form,
        trace: rec.hessian_trace,
        norm_sq: rec.vec_norm_sq,
        estimator: rec.estimator.label(),
        n_samples,
        std_err,
    };
    let bounds = BoundsRow {
        seed: tr.seed,
        d: cfg.dim,
        depth: job.depth,
        rank: job.rank,
        rho: b.rho,
        tau: b.tau,
        kappa: b.kappa,
        alpha_measured: rec.alpha,
        bound_interp: b.interpretable,
        bound_tight: b.tighter,
        bound_nonwhite: b.nonwhitened,
        regime_ok: b.regime_ok,
    };
    Ok((align, bounds))
}

/// Forgetting trial: decompose the old-task loss change along new-task training.
pub fn forgetting_trial(cfg: &ExperimentConfig, src: &DataSource, job: &Job) -> Result<Vec<ForgettingRow>> {
    let mut tr = train_old(cfg, src, job)?;
    let pair = rotate_task(&tr.task, &mut tr.rng)?;
    let cc = ClConfig {
        mode: ProjectionMode::Vanilla,
        train: TrainConfig {
            lr: cfg.new_lr,
            l2: cfg.l2,
            epochs: cfg.new_epochs,
            momentum: cfg.momentum,
            record_every: cfg.record_every,
            ..Default::default()
        },
        eps_forward: cfg.eps_forward,
        eps_backward: cfg.eps_backward,
        spectral_lambda: 0.0,
    };
    let ps = ProjectorSet::identity(cfg.dim, job.depth);
    let mut snaps: Vec<(usize, DlnParams)> = Vec::new();
    train_projected(&tr.params, &pair.new, &cc, &ps, |e, q| {
        snaps.push((e, q.clone()));
        Ok(())
    })?;
    snaps.dedup_by_key(|s| s.0);
    let mut rows = Vec::new();
    for (step, q) in snaps.into_iter().filter(|s| s.0 > 0) {
        let delta = q.sub(&tr.params);
        let fb = decompose(&tr.params, &delta, &tr.task, cfg.baseline_samples, &mut tr.rng)?;
        rows.push(ForgettingRow {
            seed: tr.seed,
            d: cfg.dim,
            depth: job.depth,
            rank: job.rank,
            step,
            actual: fb.actual,
            first: fb.first_order,
            second: fb.second_order,
            random_mean: fb.random_baseline.mean,
            random_se: fb.random_baseline.std_err,
            alpha: fb.alpha,
        });
    }
    Ok(rows)
}

/// Power-iteration trial: alignment of the cumulative plain-GD update per step.
pub fn power_trial(cfg: &ExperimentConfig, src: &DataSource, job: &Job) -> Result<Vec<AlignmentRow>> {
    let mut tr = train_old(cfg, src, job)?;
    let pair = rotate_task(&tr.task, &mut tr.rng)?;
    let series = power_iteration_trace(&tr.params, &tr.task, &pair.new, cfg.power_lr, cfg.power_steps)?;
    let trace = hessian_trace_closed(&tr.params, &tr.task)?;
    let dim = tr.params.dim_theta() as f64;
    Ok(series
        .iter()
        .map(|s| {
            let alpha = s.alpha.unwrap_or(f64::NAN);
            AlignmentRow {
                seed: tr.seed,
                d: cfg.dim,
                depth: job.depth,
                rank: job.rank,
                step: s.step,
                alpha,
                quad_form: s.alpha.map_or(0.0, |a| a * trace * s.update_norm_sq / dim),
                trace,
                norm_sq: s.update_norm_sq,
                estimator: "deterministic",
                n_samples: 1,
                std_err: 0.0,
            }
        })
        .collect())
}

/// Old task plus `tasks - 1` independent rotations of it, and a shared init.
pub fn cl_sequence(cfg: &ExperimentConfig, src: &DataSource, seed: u64, rank: usize, depth: usize) -> Result<(Vec<Task>, DlnParams)> {
    let mut rng = rng_from_seed(seed);
    let old = src.task(cfg, rank, &mut rng)?;
    let p0 = DlnParams::random_init(cfg.dim, depth, cfg.init_scale, &mut rng);
    let mut tasks = vec![old];
    for _ in 1..cfg.tasks {
        let pair = rotate_task(&tasks[0], &mut rng)?;
        tasks.push(pair.new);
    }
    Ok((tasks, p0))
}

pub fn cl_config(cfg: &ExperimentConfig, mode: ProjectionMode) -> ClConfig {
    ClConfig {
        mode,
        train: TrainConfig { record_every: cfg.record_every, ..train_config(cfg) },
        eps_forward: cfg.eps_forward,
        eps_backward: cfg.eps_backward,
        spectral_lambda: cfg.spectral_lambda,
    }
}

/// Mean over tasks `t >= 1` of the previous task's loss increase while training `t`.
pub fn mean_forgetting(r: &ClResult) -> f64 {
    let t = r.losses.len();
    (1..t).map(|k| r.losses[k][k - 1] - r.losses[k - 1][k - 1]).sum::<f64>() / (t - 1) as f64
}

pub fn mean_task_alpha(r: &ClResult) -> f64 {
    r.task_alpha.iter().sum::<f64>() / r.task_alpha.len() as f64
}

/// Continual-learning trial: every configured mode from the same init and tasks.
pub fn cl_trial(cfg: &ExperimentConfig, src: &DataSource, trial: usize) -> Result<(u64, Vec<(ProjectionMode, ClResult)>)> {
    let job = Job { depth: cfg.depths[0], rank: cfg.ranks[0], trial };
    let seed = job.seed(cfg.master_seed);
    let (tasks, p0) = cl_sequence(cfg, src, seed, job.rank, job.depth)?;
    let runs = cfg
        .modes
        .iter()
        .map(|&m| cl_run(&tasks, &p0, &cl_config(cfg, m)).map(|r| (m, r)))
        .collect::<std::result::Result<Vec<_>, LabError>>()?;
    Ok((seed, runs))
}

pub fn cl_rows(cfg: &ExperimentConfig, seed: u64, mode: ProjectionMode, r: &ClResult) -> Result<(Vec<ClRow>, ClSummaryRow)> {
    let m = cl_metrics(r.class_acc.as_ref().unwrap_or(&r.acc))?;
    let rows = r
        .steps
        .iter()
        .map(|s| ClRow {
            seed,
            mode: mode.label(),
            task: s.task + 1,
            step: s.step,
            loss_old_min: s.loss_old_min,
            alpha: s.alpha,
            forget: s.forget_old,
            acc: m.acc,
            bwt: m.bwt,
            imm_acc: m.imm_acc,
            eps_f: cfg.eps_forward,
            eps_b: cfg.eps_backward,
        })
        .collect();
    let summary = ClSummaryRow {
        seed,
        mode: mode.label(),
        mean_task_alpha: mean_task_alpha(r),
        mean_forgetting: mean_forgetting(r),
        acc: m.acc,
        bwt: m.bwt,
        imm_acc: m.imm_acc,
    };
    Ok((rows, summary))
}

/// Exact and Lanczos projection CDFs of the new-task gradient and of a
/// Rademacher vector against the old-task Hessian.
pub fn cdf_trial(cfg: &ExperimentConfig, src: &DataSource, job: &Job) -> Result<(Vec<CdfRow>, Vec<CdfMassRow>)> {
    let mut tr = train_old(cfg, src, job)?;
    let p = &tr.params;
    let h = hessian_full(p, &tr.task)?;
    let ctx = CurvatureCtx::new(p, &tr.task)?;
    let pair = rotate_task(&tr.task, &mut tr.rng)?;
    let g = grad(p, &pair.new, 0.0)?.to_vector();
    let rng = &mut tr.rng;
    let rad = g.map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let m = if cfg.lanczos_steps == 0 { p.dim_theta() } else { cfg.lanczos_steps };
    let mut curves = Vec::new();
    let mut masses = Vec::new();
    let mut threshold = None;
    for (name, v) in [("update", g), ("rademacher", rad)] {
        let exact = RitzSpectrum::exact(&h, &v)?;
        let thr = *threshold.get_or_insert_with(|| top_trace_threshold(&exact.nodes, 0.1));
        let lz = lanczos(|x| ctx.hvp_vector(x), &(&v / v.norm()), m)?;
        let sigma = if cfg.sigma_broaden > 0.0 {
            cfg.sigma_broaden * exact.scale()
        } else {
            exact.broaden_sigma
        };
        let mut sup = 0.0f64;
        for (t, c) in projection_cdf(&exact, sigma, cfg.cdf_points)? {
            let cl = lz.smooth_cdf(sigma, t);
            sup = sup.max((c - cl).abs());
            for (method, val) in [("exact", c), ("lanczos", cl)] {
                curves.push(CdfRow {
                    seed: tr.seed,
                    d: cfg.dim,
                    depth: job.depth,
                    rank: job.rank,
                    vector: name,
                    method,
                    t,
                    cdf: val,
                });
            }
        }
        for (method, spec, diff) in [("exact", &exact, 0.0), ("lanczos", &lz, sup)] {
            masses.push(CdfMassRow {
                seed: tr.seed,
                d: cfg.dim,
                depth: job.depth,
                rank: job.rank,
                vector: name,
                method,
                threshold: thr,
                mass_top: mass_above(spec, thr),
                sup_diff: diff,
            });
        }
    }
    Ok((curves, masses))
}

fn prepare(cfg: &ExperimentConfig) -> Result<DataSource> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    DataSource::from_config(cfg)
}

fn finish(cfg: &ExperimentConfig, manifest: crate::output::Manifest, outputs: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    manifest.write(&cfg.output_dir, &cfg.to_kv_string(), &outputs)?;
    for o in &outputs {
        info!("wrote {}", o.display());
    }
    Ok(outputs)
}

/// `phase.csv` (alignment schema) and `phase_bounds.csv` over the grid.
pub fn cmd_phase_transition(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("phase-transition");
    let src = prepare(cfg)?;
    let results = run_jobs(&grid_jobs(cfg), |j| phase_trial(cfg, &src, j))?;
    let phase = cfg.output_dir.join("phase.csv");
    let bounds = cfg.output_dir.join("phase_bounds.csv");
    write_csv(&phase, ALIGNMENT_HEADER, results.iter().map(|(_, (a, _))| a.record()))?;
    write_csv(&bounds, BOUNDS_HEADER, results.iter().map(|(_, (_, b))| b.record()))?;
    finish(cfg, man, vec![phase, bounds])
}

/// `bounds.csv`: measured alignment against the three lower bounds.
pub fn cmd_bounds(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("bounds");
    let src = prepare(cfg)?;
    let results = run_jobs(&grid_jobs(cfg), |j| phase_trial(cfg, &src, j))?;
    let path = cfg.output_dir.join("bounds.csv");
    write_csv(&path, BOUNDS_HEADER, results.iter().map(|(_, (_, b))| b.record()))?;
    let ok: Vec<&BoundsRow> = results.iter().map(|(_, (_, b))| b).filter(|b| b.regime_ok).collect();
    let tight = ok.iter().filter(|b| b.alpha_measured >= b.bound_tight).count();
    let interp = ok.iter().filter(|b| b.alpha_measured >= b.bound_interp).count();
    info!(
        "{} regime_ok rows: alpha >= tighter in {tight}, alpha >= interpretable in {interp}",
        ok.len()
    );
    finish(cfg, man, vec![path])
}

pub fn cmd_forgetting(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("forgetting");
    let src = prepare(cfg)?;
    let results = run_jobs(&grid_jobs(cfg), |j| forgetting_trial(cfg, &src, j))?;
    let path = cfg.output_dir.join("forgetting.csv");
    write_csv(&path, FORGETTING_HEADER, results.iter().flat_map(|(_, rows)| rows.iter().map(ForgettingRow::record)))?;
    finish(cfg, man, vec![path])
}

pub fn cmd_power_iteration(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("power-iter");
    let src = prepare(cfg)?;
    let results = run_jobs(&grid_jobs(cfg), |j| power_trial(cfg, &src, j))?;
    let path = cfg.output_dir.join("power.csv");
    write_csv(&path, ALIGNMENT_HEADER, results.iter().flat_map(|(_, rows)| rows.iter().map(AlignmentRow::record)))?;
    finish(cfg, man, vec![path])
}

/// `cl.csv` per recorded step and `cl_summary.csv` per (trial, mode).
pub fn cmd_cl_run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("cl-run");
    let src = prepare(cfg)?;
    let trials: Vec<usize> = (0..cfg.trials).collect();
    let results = run_jobs(&trials, |&t| {
        let (seed, runs) = cl_trial(cfg, &src, t)?;
        runs.iter().map(|(m, r)| cl_rows(cfg, seed, *m, r)).collect::<Result<Vec<_>>>()
    })?;
    let path = cfg.output_dir.join("cl.csv");
    let summary = cfg.output_dir.join("cl_summary.csv");
    write_csv(&path, CL_HEADER, results.iter().flat_map(|(_, v)| v.iter().flat_map(|(rows, _)| rows.iter().map(ClRow::record))))?;
    write_csv(&summary, CL_SUMMARY_HEADER, results.iter().flat_map(|(_, v)| v.iter().map(|(_, s)| s.record())))?;
    for &mode in &cfg.modes {
        let pick = |f: fn(&ClSummaryRow) -> f64| {
            let v: Vec<f64> = results
                .iter()
                .flat_map(|(_, v)| v.iter().map(|(_, s)| s))
                .filter(|s| s.mode == mode.label())
                .map(f)
                .collect();
            median(&v)
        };
        info!(
            "{}: median alpha {:.4}, median forgetting {:.4e}",
            mode.label(),
            pick(|s| s.mean_task_alpha),
            pick(|s| s.mean_forgetting)
        );
    }
    finish(cfg, man, vec![path, summary])
}

/// `cdf.csv` curves and `cdf_mass.csv` top-region masses.
pub fn cmd_cdf(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let man = Manifest::start("cdf");
    let src = prepare(cfg)?;
    let results = run_jobs(&grid_jobs(cfg), |j| cdf_trial(cfg, &src, j))?;
    let path = cfg.output_dir.join("cdf.csv");
    let mass = cfg.output_dir.join("cdf_mass.csv");
    write_csv(&path, CDF_HEADER, results.iter().flat_map(|(_, (c, _))| c.iter().map(CdfRow::record)))?;
    write_csv(&mass, CDF_MASS_HEADER, results.iter().flat_map(|(_, (_, m))| m.iter().map(CdfMassRow::record)))?;
    finish(cfg, man, vec![path, mass])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenTaskSummary {
    pub d: usize,
    pub n: usize,
    pub erank: f64,
}

/// Write a seeded synthetic teacher task to `out`.
pub fn cmd_gen_task(dim: usize, n: usize, rank: usize, noise: f64, seed: u64, out: &Path) -> Result<GenTaskSummary> {
    let man = Manifest::start("gen-task");
    let mut rng = rng_from_seed(seed);
    let task = synth_teacher_task(dim, n, rank, noise, &mut rng)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_task(&task, out)?;
    let sv = singular_values(&task.target_map(cl_lab_core::dln::DIAG_RTOL)?)?;
    let erank = erank_of_powered_spectrum(&sv, 1.0)?;
    let body = format!("dim = {dim}\nn = {n}\nrank = {rank}\nnoise = {noise}\nseed = {seed}\n");
    let mut side = out.as_os_str().to_owned();
    side.push(".manifest");
    man.write_at(Path::new(&side), &body, &[out.to_path_buf()])?;
    Ok(GenTaskSummary { d: task.d_x(), n: task.n(), erank })
}
