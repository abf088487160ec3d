//! Deep linear network `f(x) = W_L ... W_1 x` with square layers.
//!
//! Layer indices in the public API are 1-based to match the usual
//! `W_{b:a} = W_b ... W_a` notation; `W_{b:a} = I` whenever `b < a`.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;

use crate::data::Task;
use crate::linalg::{self, gaussian_matrix, Mat};
use crate::{LabError, Result};

/// Relative cutoff for numerical rank and pseudo-inverses in diagnostics.
pub const DIAG_RTOL: f64 = 1e-6;

/// Ordered layer weights; also used for gradients and directions of the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DlnParams {
    weights: Vec<Mat>,
}

impl DlnParams {
    pub fn new(weights: Vec<Mat>) -> Result<Self> {
        let d = weights
            .first()
            .ok_or_else(|| LabError::InvalidArgument("a DLN needs at least one layer".into()))?
            .nrows();
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != (d, d) {
                return Err(LabError::DimensionMismatch(format!(
                    "layer {} is {}x{}, expected {d}x{d}",
                    i + 1,
                    w.nrows(),
                    w.ncols()
                )));
            }
            linalg::ensure_finite(w, "layer weights")?;
        }
        if d == 0 {
            return Err(LabError::InvalidArgument("layer dimension must be >= 1".into()));
        }
        Ok(DlnParams { weights })
    }

    pub fn zeros(d: usize, depth: usize) -> Self {
        DlnParams {
            weights: vec![Mat::zeros(d, d); depth],
        }
    }

    pub fn identity(d: usize, depth: usize) -> Self {
        DlnParams {
            weights: vec![Mat::identity(d, d); depth],
        }
    }

    /// i.i.d. `N(0, scale^2 / d)` entries.
    pub fn random_init<R: Rng + ?Sized>(d: usize, depth: usize, scale: f64, rng: &mut R) -> Self {
        let std = scale / (d as f64).sqrt();
        DlnParams {
            weights: (0..depth).map(|_| gaussian_matrix(d, d, std, rng)).collect(),
        }
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<Mat> {
        self.weights
    }

    /// Layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> &Mat {
        &self.weights[i - 1]
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn dim_theta(&self) -> usize {
        self.depth() * self.dim() * self.dim()
    }

    pub fn same_shape(&self, other: &DlnParams) -> bool {
        self.depth() == other.depth() && self.dim() == other.dim()
    }

    pub(crate) fn check_shape(&self, other: &DlnParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LabError::DimensionMismatch(format!(
                "shape L={} d={} vs L={} d={}",
                self.depth(),
                self.dim(),
                other.depth(),
                other.dim()
            )))
        }
    }

    pub fn dot(&self, other: &DlnParams) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, c: f64) -> DlnParams {
        DlnParams {
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &DlnParams) -> DlnParams {
        DlnParams {
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| a + b * c)
                .collect(),
        }
    }

    pub fn sub(&self, other: &DlnParams) -> DlnParams {
        self.add_scaled(-1.0, other)
    }

    pub fn map_layers(&self, f: impl Fn(usize, &Mat) -> Mat) -> DlnParams {
        DlnParams {
            weights: self.weights.iter().enumerate().map(|(i, w)| f(i, w)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
    }

    /// Concatenation of the column-major `vec(W_i)`, layer 1 first.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim_theta());
        for w in &self.weights {
            v.extend_from_slice(w.as_slice());
        }
        DVector::from_vec(v)
    }

    pub fn from_vector(d: usize, depth: usize, v: &DVector<f64>) -> Result<DlnParams> {
        if v.len() != depth * d * d {
            return Err(LabError::DimensionMismatch(format!(
                "vector of length {} for L={depth}, d={d}",
                v.len()
            )));
        }
        let dd = d * d;
        Ok(DlnParams {
            weights: (0..depth)
                .map(|i| Mat::from_column_slice(d, d, &v.as_slice()[i * dd..(i + 1) * dd]))
                .collect(),
        })
    }
}

/// Prefix and suffix products of the layers.
///
/// `prefix[k] = W_{k:1}` and `suffix[k] = W_{L:k+1}` for `k = 0..=L`.
#[derive(Debug, Clone)]
pub struct Products {
    pub prefix: Vec<Mat>,
    pub suffix: Vec<Mat>,
}

impl Products {
    pub fn new(p: &DlnParams) -> Self {
        let d = p.dim();
        let l = p.depth();
        let mut prefix = Vec::with_capacity(l + 1);
        prefix.push(Mat::identity(d, d));
        for w in &p.weights {
            let next = w * prefix.last().unwrap();
            prefix.push(next);
        }
        let mut suffix = vec![Mat::identity(d, d); l + 1];
        for k in (0..l).rev() {
            suffix[k] = &suffix[k + 1] * &p.weights[k];
        }
        Products { prefix, suffix }
    }

    /// End-to-end map `W_{L:1}`.
    pub fn full(&self) -> &Mat {
        self.prefix.last().unwrap()
    }

    /// `W_{L:i+1}` for 1-based layer `i`.
    pub fn above(&self, i: usize) -> &Mat {
        &self.suffix[i]
    }

    /// `W_{i-1:1}` for 1-based layer `i`.
    pub fn below(&self, i: usize) -> &Mat {
        &self.prefix[i - 1]
    }
}

/// `W_b ... W_a` (1-based); the identity when `b < a`.
pub fn product_range(p: &DlnParams, a: usize, b: usize) -> Result<Mat> {
    let l = p.depth();
    if b < a {
        if a > l + 1 {
            return Err(LabError::InvalidArgument(format!(
                "product range start {a} exceeds L+1 = {}",
                l + 1
            )));
        }
        return Ok(Mat::identity(p.dim(), p.dim()));
    }
    if a < 1 || b > l {
        return Err(LabError::InvalidArgument(format!(
            "product range {a}..{b} outside 1..{l}"
        )));
    }
    let mut out = p.weights[a - 1].clone();
    for k in a..b {
        out = &p.weights[k] * out;
    }
    Ok(out)
}

pub(crate) fn check_task(p: &DlnParams, task: &Task) -> Result<()> {
    let d = p.dim();
    if task.d_x() != d || task.d_y() != d {
        return Err(LabError::DimensionMismatch(format!(
            "network has d={d}, task has d_x={}, d_y={}",
            task.d_x(),
            task.d_y()
        )));
    }
    Ok(())
}

fn l2_penalty(p: &DlnParams, l2: f64) -> f64 {
    if l2 == 0.0 {
        0.0
    } else {
        l2 * p.norm_sq()
    }
}

/// `1/2 |W_{L:1} X - Y|_F^2 + l2 * sum_i |W_i|_F^2`.
pub fn loss(p: &DlnParams, task: &Task, l2: f64) -> Result<f64> {
    check_task(p, task)?;
    let prod = Products::new(p);
    let r = prod.full() * task.inputs() - task.labels();
    Ok(0.5 * r.norm_squared() + l2_penalty(p, l2))
}

/// Data loss from the cached second moments; cost independent of `n`.
pub(crate) fn data_loss_stats(prod_full: &Mat, task: &Task) -> f64 {
    let pxx = prod_full * task.sxx();
    0.5 * (pxx.dot(prod_full) - 2.0 * prod_full.dot(task.syx()) + task.yy())
}

/// Residual moment `(W_{L:1} X - Y) X^T`.
pub(crate) fn residual_moment(prod_full: &Mat, sxx: &Mat, syx: &Mat) -> Mat {
    prod_full * sxx - syx
}

/// Gradient from input/label moments `XX^T` and `YX^T`.
pub(crate) fn grad_from_moments(
    p: &DlnParams,
    prod: &Products,
    sxx: &Mat,
    syx: &Mat,
    l2: f64,
) -> DlnParams {
    let r = residual_moment(prod.full(), sxx, syx);
    let l = p.depth();
    DlnParams {
        weights: (1..=l)
            .map(|i| {
                let mut g = prod.above(i).transpose() * &r * prod.below(i).transpose();
                if l2 != 0.0 {
                    g += &p.weights[i - 1] * (2.0 * l2);
                }
                g
            })
            .collect(),
    }
}

/// `dL/dW_i = W_{L:i+1}^T (W_{L:1} X - Y) X^T W_{i-1:1}^T + 2 l2 W_i`.
pub fn grad(p: &DlnParams, task: &Task, l2: f64) -> Result<DlnParams> {
    check_task(p, task)?;
    Ok(grad_from_moments(p, &Products::new(p), task.sxx(), task.syx(), l2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub grad_tol: f64,
    pub momentum: f64,
    /// Log every this many epochs; 0 disables the log.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            l2: 1e-3,
            epochs: 200,
            grad_tol: 0.0,
            momentum: 0.0,
            record_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) {
            return Err(LabError::InvalidArgument(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.epochs == 0 {
            return Err(LabError::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub rho: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub epochs_run: usize,
    pub converged: bool,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,grad_norm,rho,tau")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.loss, r.grad_norm, r.rho, r.tau)?;
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 40;

/// Full-batch gradient descent on the regularized loss.
///
/// A step that would not decrease the loss is retried with the learning rate
/// halved (up to 40 times); the base rate is restored on the next epoch.
/// Training stops early once no halving decreases the loss.
pub fn train(p0: &DlnParams, task: &Task, cfg: &TrainConfig) -> Result<(DlnParams, TrainLog)> {
    cfg.validate()?;
    check_task(p0, task)?;
    let mut p = p0.clone();
    let mut prod = Products::new(&p);
    let mut cur = data_loss_stats(prod.full(), task) + l2_penalty(&p, cfg.l2);
    if !cur.is_finite() {
        return Err(LabError::Divergence { last_finite_epoch: 0 });
    }
    let mut velocity = DlnParams::zeros(p.dim(), p.depth());
    let mut log = TrainLog::default();
    let record = |log: &mut TrainLog, epoch: usize, p: &DlnParams, loss: f64, gn: f64| {
        let diag = interpolation_diagnostics(p, task).ok();
        log.rows.push(LogRow {
            epoch,
            loss,
            grad_norm: gn,
            rho: diag.as_ref().map_or(f64::NAN, |d| d.rho),
            tau: diag.as_ref().map_or(f64::NAN, |d| d.tau),
        });
    };
    for epoch in 0..cfg.epochs {
        let g = grad_from_moments(&p, &prod, task.sxx(), task.syx(), cfg.l2);
        let gn = g.norm();
        if cfg.record_every > 0 && epoch % cfg.record_every == 0 {
            record(&mut log, epoch, &p, cur, gn);
        }
        if gn <= cfg.grad_tol {
            log.converged = true;
            log.epochs_run = epoch;
            return Ok((p, log));
        }
        let mut lr = cfg.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let step = velocity.scaled(cfg.momentum).add_scaled(-lr, &g);
            let trial = p.add_scaled(1.0, &step);
            let tprod = Products::new(&trial);
            let tl = data_loss_stats(tprod.full(), task) + l2_penalty(&trial, cfg.l2);
            if tl.is_finite() && tl < cur {
                accepted = Some((trial, tprod, tl, step));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((trial, tprod, tl, step)) => {
                p = trial;
                prod = tprod;
                cur = tl;
                velocity = step;
            }
            None => {
                if !p.is_finite() {
                    return Err(LabError::Divergence {
                        last_finite_epoch: epoch,
                    });
                }
                // no descent direction left at working precision
                log.converged = true;
                log.epochs_run = epoch + 1;
                return Ok((p, log));
            }
        }
    }
    log.epochs_run = cfg.epochs;
    if cfg.record_every > 0 {
        let g = grad_from_moments(&p, &prod, task.sxx(), task.syx(), cfg.l2);
        record(&mut log, cfg.epochs, &p, cur, g.norm());
    }
    Ok((p, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationReport {
    /// Spectral norm of `W_{L:1}^+ T - T^+ T` with `T = Y X^+`.
    pub rho: f64,
    /// Largest fraction of `|W^{a}|_F^2` outside the row space of `T`,
    /// over `a = 3 - k/L`, `k = 1..2L`.
    pub tau: f64,
    /// Unregularized data loss.
    pub residual_loss: f64,
    pub rank_product: usize,
    pub rank_target: usize,
    /// The end-to-end map has lower numerical rank than the target.
    pub rank_deficient: bool,
}

fn numerical_rank(sp: &linalg::Spectrum, rtol: f64) -> usize {
    let cut = rtol * sp.max();
    sp.values().iter().filter(|&&s| s > cut && s > 0.0).count()
}

pub fn interpolation_diagnostics(p: &DlnParams, task: &Task) -> Result<InterpolationReport> {
    check_task(p, task)?;
    let prod = Products::new(p);
    let w = prod.full();
    let t = task.target_map(DIAG_RTOL)?;
    let t_dec = linalg::svd(&t)?;
    let w_dec = linalg::svd(w)?;
    let rank_target = numerical_rank(&t_dec.singular_values, DIAG_RTOL);
    let rank_product = numerical_rank(&w_dec.singular_values, DIAG_RTOL);
    let d = p.dim();

    let pinv_from = |dec: &linalg::SpectralDecomp, k: usize| -> Mat {
        let mut out = Mat::zeros(d, d);
        for j in 0..k {
            let s = dec.singular_values.values()[j];
            out += dec.right.column(j) * dec.left.column(j).transpose() / s;
        }
        out
    };
    let t_pinv = pinv_from(&t_dec, rank_target);
    let w_pinv = pinv_from(&w_dec, rank_product);
    let proj = &t_pinv * &t;
    let delta = &w_pinv * &t - &proj;
    let rho = linalg::spectral_norm(&delta)?;

    // |W^a (I - Pi)|_F^2 / |W^a|_F^2 with W^a = U S^a V^T
    let comp = Mat::identity(d, d) - &proj;
    let vc = w_dec.right.transpose() * &comp;
    let row_spill: Vec<f64> = (0..d).map(|j| vc.row(j).norm_squared()).collect();
    let l = p.depth() as f64;
    let mut tau = 0.0f64;
    for k in 1..=2 * p.depth() {
        let a = 3.0 - k as f64 / l;
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &s) in w_dec.singular_values.values().iter().enumerate() {
            let s2a = s.powf(2.0 * a);
            num += s2a * row_spill[j];
            den += s2a;
        }
        if den > 0.0 {
            tau = tau.max((num / den).clamp(0.0, 1.0));
        }
    }
    let residual_loss = data_loss_stats(w, task).max(0.0);
    Ok(InterpolationReport {
        rho,
        tau,
        residual_loss,
        rank_product,
        rank_target,
        rank_deficient: rank_product < rank_target,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    /// `max_i |W_{i+1}^T W_{i+1} - W_i W_i^T|_F / mean_i |W_i W_i^T|_F`.
    pub imbalance: f64,
    /// Largest gap between the `k`-th singular values of any two layers,
    /// relative to the largest singular value over all layers.
    pub sv_spread: f64,
}

pub fn balance_diagnostics(p: &DlnParams) -> Result<BalanceReport> {
    let l = p.depth();
    if l < 2 {
        return Ok(BalanceReport {
            imbalance: 0.0,
            sv_spread: 0.0,
        });
    }
    let grams: Vec<Mat> = p.weights.iter().map(|w| w * w.transpose()).collect();
    let mean = grams.iter().map(|g| g.norm()).sum::<f64>() / l as f64;
    let mut worst = 0.0f64;
    for i in 0..l - 1 {
        let w = &p.weights[i + 1];
        worst = worst.max((w.transpose() * w - &grams[i]).norm());
    }
    let imbalance = if mean > 0.0 { worst / mean } else { 0.0 };
    let spectra: Vec<linalg::Spectrum> = p
        .weights
        .iter()
        .map(linalg::singular_values)
        .collect::<Result<_>>()?;
    let smax = spectra.iter().map(|s| s.max()).fold(0.0, f64::max);
    let mut gap = 0.0f64;
    for k in 0..p.dim() {
        let vals = spectra.iter().map(|s| s.values()[k]);
        let hi = vals.clone().fold(f64::MIN, f64::max);
        let lo = vals.fold(f64::MAX, f64::min);
        gap = gap.max(hi - lo);
    }
    Ok(BalanceReport {
        imbalance,
        sv_spread: if smax > 0.0 { gap / smax } else { 0.0 },
    })
}
