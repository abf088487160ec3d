//! Effective-rank lower bounds on the alignment of a new-task gradient with
//! the old-task Hessian.
//!
//! All bounds take the spectrum `sigma` of the end-to-end map `W_{L:1}`; the
//! per-layer spectrum is `sigma^{1/L}`, so `erank(Sigma^k)` is evaluated as
//! the effective rank of `sigma` raised to `k / L`.
//!
//! Every bound is evaluated along two independent paths (closed-form
//! spectrum sums and dense matrix powers) which must agree.

use crate::data::Task;
use crate::dln::{interpolation_diagnostics, DlnParams, Products, DIAG_RTOL};
use crate::linalg::{self, erank_of_powered_spectrum, Spectrum};
use crate::{LabError, Result};

/// Regime limit on `rho` and `tau`.
pub const REGIME_LIMIT: f64 = 1.0 / 3.0;

const DUAL_PATH_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    /// Singular values of `W_{L:1}` (length `d`, zeros included).
    pub sigma: Spectrum,
    pub depth: usize,
    pub d: usize,
    pub dim_theta: usize,
    pub rho: f64,
    pub tau: f64,
    /// Eigenvalues of `X X^T`, for the non-whitened bound.
    pub input_spectrum: Option<Spectrum>,
}

impl BoundInputs {
    /// Ideal inputs: perfect interpolation of a map with spectrum `sigma`.
    pub fn ideal(sigma: Spectrum, depth: usize) -> Self {
        let d = sigma.len();
        BoundInputs {
            sigma,
            depth,
            d,
            dim_theta: depth * d * d,
            rho: 0.0,
            tau: 0.0,
            input_spectrum: None,
        }
    }

    pub fn regime_ok(&self) -> bool {
        (0.0..REGIME_LIMIT).contains(&self.rho) && (0.0..REGIME_LIMIT).contains(&self.tau)
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d == 0 {
            return Err(LabError::InvalidArgument("depth and d must be >= 1".into()));
        }
        if self.sigma.len() != self.d {
            return Err(LabError::DimensionMismatch(format!(
                "spectrum has {} values for d={}",
                self.sigma.len(),
                self.d
            )));
        }
        if self.sigma.max() <= 0.0 {
            return Err(LabError::ZeroMatrix);
        }
        Ok(())
    }
}

/// Largest over least nonzero value.
pub fn condition_number(sp: &Spectrum) -> Result<f64> {
    let max = sp.max();
    if max <= 0.0 {
        return Err(LabError::ZeroMatrix);
    }
    let min = sp
        .values()
        .iter()
        .rev()
        .find(|&&v| v > DIAG_RTOL * max)
        .copied()
        .unwrap_or(max);
    Ok(max / min)
}

/// `erank(sigma^p)` for the product spectrum, by one of two routes.
trait ErankPath {
    fn erank(&self, sigma: &Spectrum, p: f64) -> Result<f64>;
}

struct SpectrumPath;
struct MatrixPath;

impl ErankPath for SpectrumPath {
    fn erank(&self, sigma: &Spectrum, p: f64) -> Result<f64> {
        erank_of_powered_spectrum(sigma, p)
    }
}

impl ErankPath for MatrixPath {
    fn erank(&self, sigma: &Spectrum, p: f64) -> Result<f64> {
        linalg::effective_rank(&linalg::psd_power(&sigma.to_diag(), p)?)
    }
}

fn interpretable_with(e: &dyn ErankPath, inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let l = inp.depth as f64;
    let d = inp.d as f64;
    let rho = inp.rho;
    let pre = (1.0 - rho - rho * (1.0 + rho).powi(2) / d) / (1.0 + (1.0 + rho).powi(2));
    let er = e.erank(&inp.sigma, 2.0 * (l - 1.0) / l)?;
    Ok(pre * inp.dim_theta as f64 / (d * er))
}

fn tighter_with(e: &dyn ErankPath, inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let big_l = inp.depth;
    let l = big_l as f64;
    let d = inp.d as f64;
    let (rho, tau) = (inp.rho, inp.tau);
    let s = &inp.sigma;
    let mut double = 0.0;
    for i in 1..=big_l {
        for j in 1..=big_l {
            let k = (i + j - 2).max(3 * big_l - i - j);
            double += e.erank(s, 2.0 * k as f64 / l)?;
        }
    }
    let mut near = 0.0;
    let mut far = 0.0;
    for i in 1..=big_l {
        near += e.erank(s, 2.0 * (i - 1).min(big_l - i) as f64 / l)?;
        far += e.erank(s, 2.0 * (i - 1).min(2 * big_l - i) as f64 / l)?;
    }
    let num = 1.0 - rho - rho * (1.0 + rho).powi(2) / d + (1.0 - tau - 2.0 * rho) / (l * l * d) * double;
    let den = (near / l) * (1.0 + (1.0 + rho).powi(2) * far / (l * d));
    let last = e.erank(s, 2.0 * (l - 1.0) / l)?;
    Ok(num / den * inp.dim_theta as f64 / last)
}

fn nonwhitened_with(e: &dyn ErankPath, inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let input = inp
        .input_spectrum
        .as_ref()
        .ok_or_else(|| LabError::InvalidArgument("non-whitened bound needs the input spectrum".into()))?;
    let kappa = condition_number(input)?;
    let big_l = inp.depth;
    let l = big_l as f64;
    let s = &inp.sigma;
    let mut double = 0.0;
    for i in 1..=big_l {
        for j in 1..=big_l {
            let k = (i + j - 2).max(3 * big_l - i - j);
            double += e.erank(s, k as f64 / l)?;
        }
    }
    let mut mixed = 0.0;
    let mut near = 0.0;
    for i in 1..=big_l {
        mixed += e.erank(s, (i - 1).min(2 * big_l - i) as f64 / l)?;
        near += e.erank(s, 2.0 * (i - 1).min(big_l - i) as f64 / l)?;
    }
    let last = e.erank(s, 2.0 * (l - 1.0) / l)?;
    Ok(double / mixed / kappa.powi(3) * inp.dim_theta as f64 / (last * near))
}

fn dual(
    f: fn(&dyn ErankPath, &BoundInputs) -> Result<f64>,
    inp: &BoundInputs,
    what: &str,
) -> Result<f64> {
    let a = f(&SpectrumPath, inp)?;
    let b = f(&MatrixPath, inp)?;
    if (a - b).abs() > DUAL_PATH_RTOL * a.abs().max(b.abs()) {
        return Err(LabError::InvalidArgument(format!(
            "{what} bound paths disagree: {a} vs {b}"
        )));
    }
    Ok(a)
}

pub fn bound_interpretable(inp: &BoundInputs) -> Result<f64> {
    dual(interpretable_with, inp, "interpretable")
}

pub fn bound_tighter(inp: &BoundInputs) -> Result<f64> {
    dual(tighter_with, inp, "tighter")
}

pub fn bound_nonwhitened(inp: &BoundInputs) -> Result<f64> {
    dual(nonwhitened_with, inp, "non-whitened")
}

/// Spectrum-path evaluations only, for cross-checking.
pub mod spectrum_path {
    use super::*;

    pub fn interpretable(inp: &BoundInputs) -> Result<f64> {
        interpretable_with(&SpectrumPath, inp)
    }

    pub fn tighter(inp: &BoundInputs) -> Result<f64> {
        tighter_with(&SpectrumPath, inp)
    }

    pub fn nonwhitened(inp: &BoundInputs) -> Result<f64> {
        nonwhitened_with(&SpectrumPath, inp)
    }
}

/// Matrix-power evaluations only, for cross-checking.
pub mod matrix_path {
    use super::*;

    pub fn interpretable(inp: &BoundInputs) -> Result<f64> {
        interpretable_with(&MatrixPath, inp)
    }

    pub fn tighter(inp: &BoundInputs) -> Result<f64> {
        tighter_with(&MatrixPath, inp)
    }

    pub fn nonwhitened(inp: &BoundInputs) -> Result<f64> {
        nonwhitened_with(&MatrixPath, inp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub interpretable: f64,
    pub tighter: f64,
    pub nonwhitened: Option<f64>,
    pub measured_alpha: Option<f64>,
    pub regime_ok: bool,
    pub rho: f64,
    pub tau: f64,
    pub kappa: f64,
}

/// Inputs for the bounds extracted from a trained model.
pub fn bound_inputs(p: &DlnParams, old_task: &Task) -> Result<BoundInputs> {
    let prod = Products::new(p);
    let sigma = linalg::singular_values(prod.full())?;
    let diag = interpolation_diagnostics(p, old_task)?;
    let (input_spectrum, _) = linalg::eigh_psd(old_task.sxx())?;
    Ok(BoundInputs {
        sigma,
        depth: p.depth(),
        d: p.dim(),
        dim_theta: p.dim_theta(),
        rho: diag.rho,
        tau: diag.tau,
        input_spectrum: Some(input_spectrum),
    })
}

pub fn check_bounds(p: &DlnParams, old_task: &Task, alpha: Option<f64>) -> Result<BoundReport> {
    let inp = bound_inputs(p, old_task)?;
    let kappa = condition_number(inp.input_spectrum.as_ref().unwrap())?;
    Ok(BoundReport {
        interpretable: bound_interpretable(&inp)?,
        tighter: bound_tighter(&inp)?,
        nonwhitened: Some(bound_nonwhitened(&inp)?),
        measured_alpha: alpha,
        regime_ok: inp.regime_ok(),
        rho: inp.rho,
        tau: inp.tau,
        kappa,
    })
}
