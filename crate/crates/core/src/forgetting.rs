//! Old-task forgetting: measurement, second-order decomposition, random
//! baselines and the multi-step power-iteration experiment.

use rand::Rng;

use crate::curvature::{alignment_alpha, AlignmentRecord, CurvatureCtx};
use crate::data::Task;
use crate::dln::{self, check_task, DlnParams, Products};
use crate::stats::RunningStats;
use crate::{LabError, Result};

/// Default number of random perturbations in the baseline.
pub const DEFAULT_BASELINE_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineStats {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingBreakdown {
    pub actual: f64,
    pub first_order: f64,
    /// `1/2 delta^T H delta`.
    pub second_order: f64,
    pub random_baseline: BaselineStats,
    pub alpha: f64,
    pub update_norm_sq: f64,
    /// `E[eps^T H eps]` for `eps ~ N(0, I / dim_theta)`, i.e. `tr(H) / dim_theta`.
    pub mean_random_quad: f64,
}

impl ForgettingBreakdown {
    /// `1/2 * alpha * |delta|^2 * mean_random_quad`.
    pub fn second_order_from_alpha(&self) -> f64 {
        0.5 * self.alpha * self.update_norm_sq * self.mean_random_quad
    }
}

/// Increase of the unregularized old-task loss from `p1` to `p2`.
pub fn forgetting_actual(p1: &DlnParams, p2: &DlnParams, old_task: &Task) -> Result<f64> {
    p1.check_shape(p2)?;
    Ok(dln::loss(p2, old_task, 0.0)? - dln::loss(p1, old_task, 0.0)?)
}

/// First- and second-order Taylor terms of the old-task loss along `delta`.
pub fn taylor_terms(p1: &DlnParams, delta: &DlnParams, old_task: &Task) -> Result<(f64, f64)> {
    p1.check_shape(delta)?;
    let g = dln::grad(p1, old_task, 0.0)?;
    let ctx = CurvatureCtx::new(p1, old_task)?;
    Ok((g.dot(delta), 0.5 * delta.dot(&ctx.hvp(delta))))
}

/// Gaussian direction rescaled to norm `norm`.
pub fn random_direction<R: Rng + ?Sized>(p: &DlnParams, norm: f64, rng: &mut R) -> DlnParams {
    let e = DlnParams::random_init(p.dim(), p.depth(), 1.0, rng);
    let n = e.norm();
    e.scaled(norm / n)
}

pub fn decompose<R: Rng + ?Sized>(
    p1: &DlnParams,
    delta: &DlnParams,
    old_task: &Task,
    k_random: usize,
    rng: &mut R,
) -> Result<ForgettingBreakdown> {
    p1.check_shape(delta)?;
    check_task(p1, old_task)?;
    let ctx = CurvatureCtx::new(p1, old_task)?;
    let trace = ctx.trace_closed();
    let dim = p1.dim_theta();
    let base = dln::loss(p1, old_task, 0.0)?;
    let actual = dln::loss(&p1.add_scaled(1.0, delta), old_task, 0.0)? - base;
    let g = dln::grad(p1, old_task, 0.0)?;
    let first_order = g.dot(delta);
    let quad = delta.dot(&ctx.hvp(delta));
    let norm_sq = delta.norm_sq();
    let alpha = if norm_sq > 0.0 {
        alignment_alpha(quad, trace, norm_sq, dim)?.alpha
    } else {
        f64::NAN
    };
    let norm = norm_sq.sqrt();
    let mut rs = RunningStats::new();
    for _ in 0..k_random {
        let e = random_direction(p1, norm, rng);
        rs.push(dln::loss(&p1.add_scaled(1.0, &e), old_task, 0.0)? - base);
    }
    Ok(ForgettingBreakdown {
        actual,
        first_order,
        second_order: 0.5 * quad,
        random_baseline: BaselineStats {
            mean: rs.mean(),
            std_err: rs.std_err(),
            n: k_random,
        },
        alpha,
        update_norm_sq: norm_sq,
        mean_random_quad: trace / dim as f64,
    })
}

/// One step of the power-iteration experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerStep {
    pub step: usize,
    /// Alignment of the cumulative update against the old-task Hessian;
    /// `None` when the update is zero.
    pub alpha: Option<f64>,
    pub update_norm_sq: f64,
    /// Old-task forgetting after this step.
    pub forgetting: f64,
}

/// Plain gradient descent on `new_task` (no regularizer, no backtracking),
/// recording after every step the alignment of the cumulative update with the
/// old-task Hessian at `p1`. A non-finite iterate truncates the series.
pub fn power_iteration_trace(
    p1: &DlnParams,
    old_task: &Task,
    new_task: &Task,
    lr: f64,
    steps: usize,
) -> Result<Vec<PowerStep>> {
    if steps < 2 {
        return Err(LabError::InvalidArgument("power iteration needs steps >= 2".into()));
    }
    if !(lr > 0.0) {
        return Err(LabError::InvalidArgument(format!("lr must be > 0, got {lr}")));
    }
    check_task(p1, old_task)?;
    check_task(p1, new_task)?;
    let ctx = CurvatureCtx::new(p1, old_task)?;
    let trace = ctx.trace_closed();
    let base = dln::loss(p1, old_task, 0.0)?;
    let mut p = p1.clone();
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        let prod = Products::new(&p);
        let g = dln::grad_from_moments(&p, &prod, new_task.sxx(), new_task.syx(), 0.0);
        let next = p.add_scaled(-lr, &g);
        if !next.is_finite() {
            break;
        }
        p = next;
        let delta = p.sub(p1);
        let nsq = delta.norm_sq();
        let alpha = if nsq > 0.0 && trace > 0.0 {
            let rec: AlignmentRecord =
                alignment_alpha(delta.dot(&ctx.hvp(&delta)), trace, nsq, p1.dim_theta())?;
            Some(rec.alpha)
        } else {
            None
        };
        let forgetting = dln::loss(&p, old_task, 0.0)? - base;
        if !forgetting.is_finite() {
            break;
        }
        out.push(PowerStep {
            step,
            alpha,
            update_norm_sq: nsq,
            forgetting,
        });
    }
    Ok(out)
}
