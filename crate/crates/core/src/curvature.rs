//! Curvature of the unregularized DLN loss: Hessian-vector products,
//! closed-form traces and expected alignment, Hutchinson and Lanczos
//! estimators, the alignment metric and projection CDFs.

use nalgebra::DVector;
use rand::Rng;

use crate::data::{rotate_task_with, Task};
use crate::dln::{self, check_task, DlnParams, Products};
use crate::linalg::{self, haar_orthogonal, Mat};
use crate::stats::{RatioStats, RunningStats};
use crate::{LabError, Result};

/// Largest parameter count for which the dense Hessian may be formed.
pub const MAX_DENSE_PARAMS: usize = 5000;

/// Everything an HVP needs that does not depend on the direction.
#[derive(Debug, Clone)]
pub struct CurvatureCtx {
    depth: usize,
    d: usize,
    prod: Products,
    /// `mid[a][b] = W_{b:a}` (1-based, identity for `b < a`).
    mid: Vec<Vec<Mat>>,
    sxx: Mat,
    /// Residual moment `(W_{L:1} X - Y) X^T`.
    r: Mat,
}

impl CurvatureCtx {
    pub fn new(p: &DlnParams, task: &Task) -> Result<Self> {
        check_task(p, task)?;
        Ok(Self::from_moments(p, task.sxx(), task.syx()))
    }

    pub(crate) fn from_moments(p: &DlnParams, sxx: &Mat, syx: &Mat) -> Self {
        let l = p.depth();
        let d = p.dim();
        let prod = Products::new(p);
        let mut mid = vec![vec![Mat::identity(d, d); l + 1]; l + 2];
        for a in 1..=l {
            for b in a..=l {
                mid[a][b] = if b == a {
                    p.layer(a).clone()
                } else {
                    p.layer(b) * &mid[a][b - 1]
                };
            }
        }
        let r = dln::residual_moment(prod.full(), sxx, syx);
        CurvatureCtx {
            depth: l,
            d,
            prod,
            mid,
            sxx: sxx.clone(),
            r,
        }
    }

    fn mid(&self, a: usize, b: usize) -> &Mat {
        &self.mid[a][b]
    }

    pub fn dim_theta(&self) -> usize {
        self.depth * self.d * self.d
    }

    pub fn hvp(&self, v: &DlnParams) -> DlnParams {
        let l = self.depth;
        let d = self.d;
        let a = |i: usize| self.prod.above(i);
        let b = |i: usize| self.prod.below(i);
        let mut s = Mat::zeros(d, d);
        for i in 1..=l {
            s += a(i) * v.layer(i) * b(i);
        }
        let s_sxx = &s * &self.sxx;
        // R B_i^T V_i^T and V_i^T A_i^T R, shared across layers
        let left: Vec<Mat> = (1..=l)
            .map(|i| &self.r * b(i).transpose() * v.layer(i).transpose())
            .collect();
        let right: Vec<Mat> = (1..=l)
            .map(|i| v.layer(i).transpose() * a(i).transpose() * &self.r)
            .collect();
        let mut out = Vec::with_capacity(l);
        for j in 1..=l {
            let aj_t = a(j).transpose();
            let bj_t = b(j).transpose();
            let mut acc = &s_sxx * &bj_t;
            for i in 1..j {
                acc += &left[i - 1] * self.mid(i + 1, j - 1).transpose();
            }
            let mut o = &aj_t * acc;
            for i in j + 1..=l {
                o += self.mid(j + 1, i - 1).transpose() * &right[i - 1] * &bj_t;
            }
            out.push(o);
        }
        DlnParams::new(out).expect("hvp preserves shape")
    }

    pub fn hvp_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let p = DlnParams::from_vector(self.d, self.depth, v).expect("vector length matches");
        self.hvp(&p).to_vector()
    }

    pub fn trace_closed(&self) -> f64 {
        (1..=self.depth)
            .map(|i| {
                let b = self.prod.below(i);
                self.prod.above(i).norm_squared() * (b * &self.sxx).dot(b)
            })
            .sum()
    }
}

/// Hessian-vector product of the data loss (no regularizer).
pub fn hvp(p: &DlnParams, task: &Task, v: &DlnParams) -> Result<DlnParams> {
    p.check_shape(v)?;
    Ok(CurvatureCtx::new(p, task)?.hvp(v))
}

/// Dense Hessian in the `to_vector` parameter ordering.
pub fn hessian_full(p: &DlnParams, task: &Task) -> Result<Mat> {
    let n = p.dim_theta();
    if n > MAX_DENSE_PARAMS {
        return Err(LabError::TooLarge(n));
    }
    let ctx = CurvatureCtx::new(p, task)?;
    let mut h = Mat::zeros(n, n);
    let mut e = DVector::zeros(n);
    for k in 0..n {
        e[k] = 1.0;
        h.set_column(k, &ctx.hvp_vector(&e));
        e[k] = 0.0;
    }
    Ok(h)
}

/// `tr(H) = sum_i |W_{L:i+1}|_F^2 |W_{i-1:1} X|_F^2`.
pub fn hessian_trace_closed(p: &DlnParams, task: &Task) -> Result<f64> {
    Ok(CurvatureCtx::new(p, task)?.trace_closed())
}

fn rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Hutchinson estimate of `tr(H)` with Rademacher probes; returns
/// `(estimate, standard error)`.
pub fn hessian_trace_hutchinson<R: Rng + ?Sized>(
    p: &DlnParams,
    task: &Task,
    k_probes: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if k_probes < 2 {
        return Err(LabError::InvalidArgument("Hutchinson needs at least 2 probes".into()));
    }
    let ctx = CurvatureCtx::new(p, task)?;
    let n = ctx.dim_theta();
    let stats: RunningStats = (0..k_probes)
        .map(|_| {
            let r = rademacher(n, rng);
            r.dot(&ctx.hvp_vector(&r))
        })
        .collect();
    Ok((stats.mean(), stats.std_err()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Deterministic,
    MonteCarlo { n_samples: usize, std_err: f64 },
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Deterministic => "deterministic",
            Estimator::MonteCarlo { .. } => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub alpha: f64,
    pub quad_form: f64,
    pub hessian_trace: f64,
    pub vec_norm_sq: f64,
    pub dim_theta: usize,
    pub estimator: Estimator,
}

/// `alpha = dim_theta * quad_form / (trace * norm_sq)`.
pub fn alignment_alpha(
    quad_form: f64,
    trace: f64,
    norm_sq: f64,
    dim_theta: usize,
) -> Result<AlignmentRecord> {
    if !(trace > 0.0) {
        return Err(LabError::InvalidArgument(format!("Hessian trace must be > 0, got {trace}")));
    }
    if !(norm_sq > 0.0) {
        return Err(LabError::InvalidArgument(format!("vector norm must be > 0, got {norm_sq}")));
    }
    Ok(AlignmentRecord {
        alpha: dim_theta as f64 * quad_form / (trace * norm_sq),
        quad_form,
        hessian_trace: trace,
        vec_norm_sq: norm_sq,
        dim_theta,
        estimator: Estimator::Deterministic,
    })
}

/// Deterministic alignment of one direction against the task's Hessian.
pub fn alignment_of(p: &DlnParams, task: &Task, v: &DlnParams) -> Result<AlignmentRecord> {
    p.check_shape(v)?;
    let ctx = CurvatureCtx::new(p, task)?;
    alignment_alpha(v.dot(&ctx.hvp(v)), ctx.trace_closed(), v.norm_sq(), p.dim_theta())
}

/// Raw Monte-Carlo moments over Haar-rotated copies of `old_task`:
/// `g^T H g`, `|g|^2` and their joint ratio accumulator, where `g` is the
/// unregularized gradient on the rotated task and `H` the old-task Hessian.
#[derive(Debug, Clone, Default)]
pub struct RotationMoments {
    pub quad: RunningStats,
    pub norm_sq: RunningStats,
    pub ratio: RatioStats,
}

impl RotationMoments {
    pub fn merge(&mut self, other: &RotationMoments) {
        self.quad.merge(&other.quad);
        self.norm_sq.merge(&other.norm_sq);
        self.ratio.merge(&other.ratio);
    }
}

pub fn rotation_moments<R: Rng + ?Sized>(
    p: &DlnParams,
    old_task: &Task,
    n_rotations: usize,
    rng: &mut R,
) -> Result<RotationMoments> {
    let ctx = CurvatureCtx::new(p, old_task)?;
    let prod = Products::new(p);
    let mut m = RotationMoments::default();
    for _ in 0..n_rotations {
        let u = haar_orthogonal(p.dim(), rng);
        let sxx = &u * old_task.sxx() * u.transpose();
        let syx = old_task.syx() * u.transpose();
        let g = dln::grad_from_moments(p, &prod, &sxx, &syx, 0.0);
        let q = g.dot(&ctx.hvp(&g));
        let n = g.norm_sq();
        m.quad.push(q);
        m.norm_sq.push(n);
        m.ratio.push(q, n);
    }
    Ok(m)
}

/// Alignment record from accumulated rotation moments.
pub fn alpha_from_moments(
    m: &RotationMoments,
    trace: f64,
    dim_theta: usize,
) -> Result<AlignmentRecord> {
    let mut rec = alignment_alpha(m.quad.mean(), trace, m.norm_sq.mean(), dim_theta)?;
    rec.estimator = Estimator::MonteCarlo {
        n_samples: m.quad.count() as usize,
        std_err: dim_theta as f64 / trace * m.ratio.ratio_std_err(),
    };
    Ok(rec)
}

/// Monte-Carlo alignment of the new-task gradient over random rotations.
pub fn expected_alpha_monte_carlo<R: Rng + ?Sized>(
    p: &DlnParams,
    old_task: &Task,
    n_rotations: usize,
    rng: &mut R,
) -> Result<AlignmentRecord> {
    if n_rotations == 0 {
        return Err(LabError::InvalidArgument("need at least one rotation".into()));
    }
    let m = rotation_moments(p, old_task, n_rotations, rng)?;
    alpha_from_moments(&m, hessian_trace_closed(p, old_task)?, p.dim_theta())
}

/// Alignment of the gradient on the task rotated by a fixed `u`.
pub fn alpha_for_rotation(p: &DlnParams, old_task: &Task, u: &Mat) -> Result<AlignmentRecord> {
    let pair = rotate_task_with(old_task, u.clone())?;
    let g = dln::grad(p, &pair.new, 0.0)?;
    alignment_of(p, old_task, &g)
}

fn require_whitened(task: &Task) -> Result<()> {
    if task.is_whitened() {
        Ok(())
    } else {
        Err(LabError::NotWhitened(crate::data::whitening_error(task.inputs())))
    }
}

/// Expected `|g|^2` over Haar rotations of a whitened old task.
pub fn grad_norm_expected_closed(p: &DlnParams, old_task: &Task) -> Result<f64> {
    check_task(p, old_task)?;
    require_whitened(old_task)?;
    let prod = Products::new(p);
    let full = prod.full();
    let z = old_task.syx();
    let d = p.dim() as f64;
    let mut total = 0.0;
    for i in 1..=p.depth() {
        let at = prod.above(i).transpose();
        let b = prod.below(i);
        total += (&at * full * b.transpose()).norm_squared();
        total += (&at * z).norm_squared() * b.norm_squared() / d;
    }
    Ok(total)
}

/// Expected `g^T H g` over Haar rotations of a whitened old task.
pub fn ghg_expected_closed(p: &DlnParams, old_task: &Task) -> Result<f64> {
    check_task(p, old_task)?;
    require_whitened(old_task)?;
    let ctx = CurvatureCtx::new(p, old_task)?;
    let l = p.depth();
    let d = p.dim();
    let df = d as f64;
    let full = ctx.prod.full();
    let z = old_task.syx();
    let zz = z * z.transpose();
    let k: Vec<Mat> = (1..=l)
        .map(|i| ctx.prod.above(i) * ctx.prod.above(i).transpose())
        .collect();
    let m: Vec<Mat> = (1..=l)
        .map(|i| ctx.prod.below(i).transpose() * ctx.prod.below(i))
        .collect();

    let mut s = Mat::zeros(d, d);
    for i in 0..l {
        s += &k[i] * full * &m[i];
    }
    let mut total = s.norm_squared();

    for i in 1..=l {
        let kz = &k[i - 1] * &zz;
        for j in 1..=l {
            let bb = ctx.prod.below(i) * ctx.prod.below(j).transpose();
            total += bb.norm_squared() * kz.dot(&k[j - 1]) / df;
        }
    }

    for j in 1..=l {
        for i in 1..j {
            let n = ctx.mid(i + 1, j - 1);
            let bj_t = ctx.prod.below(j).transpose();
            let ai = ctx.prod.above(i);
            let e1 = &k[j - 1] * full * &bj_t * n * ai.transpose() * full * &m[i - 1];
            let e2 = &k[j - 1] * &zz * ai * n.transpose() * ctx.prod.below(j) * &m[i - 1] / df;
            total += 2.0 * ctx.r.dot(&(e1 + e2));
        }
    }
    Ok(total)
}

/// Expected alignment of the new-task gradient in closed form.
pub fn alpha_closed(p: &DlnParams, old_task: &Task) -> Result<AlignmentRecord> {
    alignment_alpha(
        ghg_expected_closed(p, old_task)?,
        hessian_trace_closed(p, old_task)?,
        grad_norm_expected_closed(p, old_task)?,
        p.dim_theta(),
    )
}

/// Ritz nodes and weights of a start vector against a symmetric operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RitzSpectrum {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub broaden_sigma: f64,
}

impl RitzSpectrum {
    /// Largest absolute node, used to pick a default broadening.
    pub fn scale(&self) -> f64 {
        self.nodes.iter().fold(0.0f64, |a, n| a.max(n.abs()))
    }

    /// Exact spectral measure of `v` against dense symmetric `h`.
    pub fn exact(h: &Mat, v: &DVector<f64>) -> Result<RitzSpectrum> {
        let vn = v.norm();
        if vn == 0.0 {
            return Err(LabError::InvalidArgument("start vector is zero".into()));
        }
        let e = linalg::eigh(h)?;
        let proj = e.vectors.transpose() * v / vn;
        let weights: Vec<f64> = proj.iter().map(|c| c * c).collect();
        let total: f64 = weights.iter().sum();
        let mut out = RitzSpectrum {
            nodes: e.values,
            weights: weights.iter().map(|w| w / total).collect(),
            broaden_sigma: 0.0,
        };
        out.broaden_sigma = DEFAULT_BROADEN_FRACTION * out.scale();
        Ok(out)
    }

    /// Unbroadened CDF `sum_k w_k 1[node_k <= t]`.
    pub fn step_cdf(&self, t: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .filter(|(n, _)| **n <= t)
            .map(|(_, w)| w)
            .sum()
    }

    /// Gaussian-broadened CDF at `t`.
    pub fn smooth_cdf(&self, sigma: f64, t: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| w * normal_cdf((t - n) / sigma))
            .sum()
    }
}

/// Default broadening as a fraction of the largest Ritz value.
pub const DEFAULT_BROADEN_FRACTION: f64 = 0.01;

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// `m`-step Lanczos with full reorthogonalization.
pub fn lanczos<F>(op: F, start: &DVector<f64>, m: usize) -> Result<RitzSpectrum>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if m == 0 {
        return Err(LabError::InvalidArgument("Lanczos needs m >= 1".into()));
    }
    let sn = start.norm();
    if (sn - 1.0).abs() > 1e-8 {
        return Err(LabError::InvalidArgument(format!(
            "Lanczos start must be unit norm, got {sn}"
        )));
    }
    let n = start.len();
    let m = m.min(n);
    let mut basis: Vec<DVector<f64>> = vec![start / sn];
    let mut alphas = Vec::with_capacity(m);
    let mut betas: Vec<f64> = Vec::with_capacity(m);
    let mut scale = 0.0f64;
    for k in 0..m {
        let q = &basis[k];
        let mut w = op(q);
        let a = q.dot(&w);
        alphas.push(a);
        scale = scale.max(a.abs());
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        if k + 1 == m {
            break;
        }
        let beta = w.norm();
        scale = scale.max(beta);
        if beta <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    let k = alphas.len();
    let mut t = Mat::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = linalg::eigh(&t)?;
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|j| (eig.values[j], eig.vectors[(0, j)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut out = RitzSpectrum {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
        broaden_sigma: 0.0,
    };
    out.broaden_sigma = DEFAULT_BROADEN_FRACTION * out.scale();
    Ok(out)
}

/// Gaussian-broadened projection CDF sampled on `points` grid values
/// spanning six broadening widths beyond the extreme nodes.
pub fn projection_cdf(spec: &RitzSpectrum, sigma: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if !(sigma > 0.0) {
        return Err(LabError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if spec.nodes.is_empty() || points < 2 {
        return Err(LabError::InvalidArgument("need nodes and at least 2 grid points".into()));
    }
    let lo = spec.nodes.iter().cloned().fold(f64::INFINITY, f64::min) - 6.0 * sigma;
    let hi = spec.nodes.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 6.0 * sigma;
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points)
        .map(|k| {
            let t = if k + 1 == points { hi } else { lo + step * k as f64 };
            (t, spec.smooth_cdf(sigma, t))
        })
        .collect())
}

/// Smallest `t` such that eigenvalues above `t` carry at least `frac` of the
/// positive trace.
pub fn top_trace_threshold(eigenvalues: &[f64], frac: f64) -> f64 {
    let mut v: Vec<f64> = eigenvalues.iter().cloned().filter(|x| *x > 0.0).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = v.iter().sum();
    let mut acc = 0.0;
    for x in &v {
        acc += x;
        if acc >= frac * total {
            return *x;
        }
    }
    v.last().copied().unwrap_or(0.0)
}

/// Density-weighted analog of [`top_trace_threshold`]: smallest node `t` such
/// that nodes `>= t` carry at least `frac` of `sum_k w_k max(node_k, 0)`.
pub fn top_trace_threshold_density(spec: &RitzSpectrum, frac: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = spec
        .nodes
        .iter()
        .zip(&spec.weights)
        .filter(|(n, _)| **n > 0.0)
        .map(|(n, w)| (*n, *w))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = pairs.iter().map(|(n, w)| n * w).sum();
    let mut acc = 0.0;
    for (n, w) in &pairs {
        acc += n * w;
        if acc >= frac * total {
            return *n;
        }
    }
    pairs.last().map(|p| p.0).unwrap_or(0.0)
}

/// Projection mass of `spec` on nodes `>= threshold`.
pub fn mass_above(spec: &RitzSpectrum, threshold: f64) -> f64 {
    spec.nodes
        .iter()
        .zip(&spec.weights)
        .filter(|(n, _)| **n >= threshold)
        .map(|(_, w)| w)
        .sum()
}
