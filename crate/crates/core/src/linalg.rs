//! Dense real linear algebra. Matrices are `nalgebra` values; the SVD and
//! symmetric eigensolver run through `faer`.
//!
//! Decompositions here follow a fixed ordering and sign convention so that
//! downstream CSV output is bit-stable for a given seed: values are sorted
//! nonincreasing and every left (or eigen) vector has its largest-magnitude
//! entry positive.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{LabError, Result};

pub type Mat = DMatrix<f64>;

/// Eigenvalues in `[-PSD_CLAMP * lambda_max, 0)` are treated as roundoff and set to zero.
pub const PSD_CLAMP: f64 = 1e-10;

fn to_faer(m: &Mat) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Nonincreasing, nonnegative list of singular or eigen values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LabError::InvalidArgument(
                "spectrum values must be finite and nonnegative".into(),
            ));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Spectrum(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.first().copied().unwrap_or(0.0)
    }

    /// Elementwise power with the convention `0^0 = 1`.
    pub fn powered(&self, p: f64) -> Spectrum {
        Spectrum(self.0.iter().map(|v| v.powf(p)).collect())
    }

    pub fn to_diag(&self) -> Mat {
        Mat::from_diagonal(&nalgebra::DVector::from_row_slice(&self.0))
    }
}

/// Thin singular value decomposition `m = left * diag(values) * right^T`.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub left: Mat,
    pub singular_values: Spectrum,
    pub right: Mat,
}

impl SpectralDecomp {
    pub fn reconstruct(&self) -> Mat {
        &self.left * self.singular_values.to_diag() * self.right.transpose()
    }
}

/// Symmetric eigendecomposition, eigenvalues descending (may be negative).
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

fn fix_column_signs(cols: &mut Mat, partner: Option<&mut Mat>) {
    let mut flips = Vec::with_capacity(cols.ncols());
    for j in 0..cols.ncols() {
        let col = cols.column(j);
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            // first index wins on exact ties
            if x.abs() > best {
                best = x.abs();
                sign = if x < 0.0 { -1.0 } else { 1.0 };
            }
        }
        flips.push(sign);
    }
    for (j, s) in flips.iter().enumerate() {
        if *s < 0.0 {
            cols.column_mut(j).neg_mut();
        }
    }
    if let Some(p) = partner {
        for (j, s) in flips.iter().enumerate() {
            if *s < 0.0 {
                p.column_mut(j).neg_mut();
            }
        }
    }
}

fn permute_columns(m: &Mat, order: &[usize]) -> Mat {
    Mat::from_fn(m.nrows(), order.len(), |i, j| m[(i, order[j])])
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LabError::InvalidArgument(format!("{what} has non-finite entries")))
    }
}

pub fn svd(m: &Mat) -> Result<SpectralDecomp> {
    ensure_finite(m, "svd input")?;
    let (rows, cols) = m.shape();
    let dec = to_faer(m)
        .thin_svd()
        .map_err(|_| LabError::SvdNonConvergence { rows, cols })?;
    let u = from_faer(dec.U());
    let v = from_faer(dec.V());
    let sv = dec.S().column_vector();
    let s: Vec<f64> = (0..sv.nrows()).map(|k| sv[k]).collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut left = permute_columns(&u, &order);
    let mut right = permute_columns(&v, &order);
    let values: Vec<f64> = order.iter().map(|&k| s[k].max(0.0)).collect();
    fix_column_signs(&mut left, Some(&mut right));
    Ok(SpectralDecomp {
        left,
        singular_values: Spectrum(values),
        right,
    })
}

pub fn singular_values(m: &Mat) -> Result<Spectrum> {
    Ok(svd(m)?.singular_values)
}

/// Relative asymmetry `|s - s^T|_F / |s|_F` (0 for the zero matrix).
pub fn asymmetry(s: &Mat) -> f64 {
    let n = s.norm();
    if n == 0.0 {
        0.0
    } else {
        (s - s.transpose()).norm() / n
    }
}

pub fn eigh(s: &Mat) -> Result<SymEigen> {
    if !s.is_square() {
        return Err(LabError::DimensionMismatch(format!(
            "eigh needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    ensure_finite(s, "eigh input")?;
    let asym = asymmetry(s);
    if asym > 1e-8 {
        return Err(LabError::NotSymmetric(asym));
    }
    let sym = (s + s.transpose()) * 0.5;
    let n = sym.nrows();
    let dec = to_faer(&sym)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| LabError::SvdNonConvergence { rows: n, cols: n })?;
    let ev = dec.S().column_vector();
    let vals: Vec<f64> = (0..n).map(|k| ev[k]).collect();
    let vecs = from_faer(dec.U());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut vectors = permute_columns(&vecs, &order);
    fix_column_signs(&mut vectors, None);
    Ok(SymEigen {
        values: order.iter().map(|&k| vals[k]).collect(),
        vectors,
    })
}

/// Eigendecomposition of a PSD matrix with roundoff negatives clamped to zero.
pub fn eigh_psd(s: &Mat) -> Result<(Spectrum, Mat)> {
    let e = eigh(s)?;
    let lmax = e.values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = -PSD_CLAMP * lmax;
    let mut vals = Vec::with_capacity(e.values.len());
    for &v in &e.values {
        if v < 0.0 {
            if v < floor || lmax == 0.0 {
                return Err(LabError::NotPsd { min: v, max: lmax });
            }
            vals.push(0.0);
        } else {
            vals.push(v);
        }
    }
    Ok((Spectrum(vals), e.vectors))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q multiplied by `sign(diag(R))`.
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    assert!(d >= 1, "haar_orthogonal needs d >= 1");
    let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn erank_from_values(vals: &[f64]) -> Result<f64> {
    let s1: f64 = vals.iter().sum();
    let s2: f64 = vals.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(LabError::ZeroMatrix);
    }
    Ok(s1 * s1 / s2)
}

/// Soft rank `tr(A)^2 / tr(A^2)` of a symmetric PSD matrix.
pub fn effective_rank(s: &Mat) -> Result<f64> {
    if s.iter().all(|x| *x == 0.0) {
        return Err(LabError::ZeroMatrix);
    }
    let (spec, _) = eigh_psd(s)?;
    erank_from_values(spec.values())
}

/// Effective rank of `diag(sp)^p`, with `0^0 = 1`.
pub fn erank_of_powered_spectrum(sp: &Spectrum, p: f64) -> Result<f64> {
    if sp.is_empty() {
        return Err(LabError::InvalidArgument("empty spectrum".into()));
    }
    if !(p >= 0.0) {
        return Err(LabError::InvalidArgument(format!("power must be >= 0, got {p}")));
    }
    erank_from_values(sp.powered(p).values())
}

/// `s^p` for PSD `s` (eigenvectors kept, eigenvalues powered, `0^0 = 1`).
pub fn psd_power(s: &Mat, p: f64) -> Result<Mat> {
    if !(p >= 0.0) {
        return Err(LabError::InvalidArgument(format!("power must be >= 0, got {p}")));
    }
    let (spec, v) = eigh_psd(s)?;
    let d = spec.powered(p).to_diag();
    let out = &v * d * v.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Moore-Penrose pseudo-inverse; singular values `<= rtol * sigma_max` are dropped.
pub fn pinv(m: &Mat, rtol: f64) -> Result<Mat> {
    if !(rtol > 0.0 && rtol < 1.0) {
        return Err(LabError::InvalidArgument(format!("rtol must lie in (0,1), got {rtol}")));
    }
    let dec = svd(m)?;
    let smax = dec.singular_values.max();
    let cut = rtol * smax;
    let inv: Vec<f64> = dec
        .singular_values
        .values()
        .iter()
        .map(|&s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    let d = Mat::from_diagonal(&nalgebra::DVector::from_vec(inv));
    Ok(&dec.right * d * dec.left.transpose())
}

/// Coefficients `(p, q)` of the fourth Haar moment
/// `E[S A S^T B S A S^T] = (|A|_F^2 / d) (p tr(B) I + q B)`.
pub fn pq_fourth_moment_coeffs(erank_a: f64, d: usize) -> Result<(f64, f64)> {
    if d < 2 {
        return Err(LabError::InvalidArgument("fourth moment needs d >= 2".into()));
    }
    let df = d as f64;
    let tol = 1e-12 * df;
    if !(erank_a >= 1.0 - tol && erank_a <= df + tol) {
        return Err(LabError::InvalidArgument(format!(
            "erank {erank_a} outside [1, {d}]"
        )));
    }
    let e = erank_a.clamp(1.0, df);
    let p = (df - e) / ((df - 1.0) * (df + 2.0));
    let q = (e + 1.0 + (e - 1.0) / (df - 1.0)) / (df + 2.0);
    Ok((p, q))
}

pub fn frob_sq(m: &Mat) -> f64 {
    m.norm_squared()
}

/// Frobenius inner product `<a, b> = tr(a^T b)`.
pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.dot(b)
}

/// Entrywise Monte-Carlo mean and standard error of `f(U)` over `n` Haar draws.
pub fn haar_matrix_moment<R: Rng + ?Sized>(
    d: usize,
    n: usize,
    rng: &mut R,
    f: impl Fn(&Mat) -> Mat,
) -> (Mat, Mat) {
    let mut sum: Option<Mat> = None;
    let mut sum_sq: Option<Mat> = None;
    for _ in 0..n {
        let v = f(&haar_orthogonal(d, rng));
        let sq = v.component_mul(&v);
        match (&mut sum, &mut sum_sq) {
            (Some(s), Some(q)) => {
                *s += &v;
                *q += &sq;
            }
            _ => {
                sum = Some(v);
                sum_sq = Some(sq);
            }
        }
    }
    let nf = n as f64;
    let mean = sum.unwrap_or_else(|| Mat::zeros(d, d)) / nf;
    let var = (sum_sq.unwrap_or_else(|| Mat::zeros(d, d)) / nf - mean.component_mul(&mean)) * (nf / (nf - 1.0).max(1.0));
    let se = var.map(|v| (v.max(0.0) / nf).sqrt());
    (mean, se)
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(singular_values(m)?.max())
}
