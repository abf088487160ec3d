//! Gradient projection for continual learning: forward projection onto the
//! nullspace of past input covariances, backward projection (backGP) onto the
//! nullspace of past output-gradient covariances, spectral regularization and
//! the usual CL metrics.

use crate::curvature::{alignment_alpha, CurvatureCtx};
use crate::data::Task;
use crate::dln::{self, check_task, DlnParams, Products, TrainConfig};
use crate::linalg::{eigh_psd, Mat};
use crate::{LabError, Result};

/// `(W_{i-1:1} X)(W_{i-1:1} X)^T` for 1-based layer `i`.
pub fn input_covariance(p: &DlnParams, task: &Task, i: usize) -> Result<Mat> {
    check_layer(p, i)?;
    check_task(p, task)?;
    let prod = Products::new(p);
    let b = prod.below(i);
    Ok(b * task.sxx() * b.transpose())
}

/// `G G^T` with `G = W_{L:i+1}^T (W_{L:1} X - Y)`, the per-sample gradients
/// of the loss with respect to the output of layer `i`.
pub fn output_grad_covariance(p: &DlnParams, task: &Task, i: usize) -> Result<Mat> {
    check_layer(p, i)?;
    check_task(p, task)?;
    let prod = Products::new(p);
    let g = prod.above(i).transpose() * (prod.full() * task.inputs() - task.labels());
    Ok(&g * g.transpose())
}

fn check_layer(p: &DlnParams, i: usize) -> Result<()> {
    if i == 0 || i > p.depth() {
        return Err(LabError::InvalidArgument(format!(
            "layer {i} outside 1..{}",
            p.depth()
        )));
    }
    Ok(())
}

/// Projector onto the span of the trailing eigenvectors of `s` whose
/// eigenvalues sum to at most `eps * tr(s)`, taking as many as the rule allows.
pub fn nullspace_projector(s: &Mat, eps: f64) -> Result<Mat> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LabError::InvalidArgument(format!("eps must lie in (0,1), got {eps}")));
    }
    let d = s.nrows();
    if s.iter().all(|x| *x == 0.0) {
        return Ok(Mat::identity(d, d));
    }
    let (spec, v) = eigh_psd(s)?;
    let vals = spec.values();
    let total: f64 = vals.iter().sum();
    let mut tail = 0.0;
    let mut keep = 0;
    for k in (0..d).rev() {
        if tail + vals[k] <= eps * total {
            tail += vals[k];
            keep += 1;
        } else {
            break;
        }
    }
    let mut out = Mat::zeros(d, d);
    for k in d - keep..d {
        let c = v.column(k);
        out += c * c.transpose();
    }
    Ok((&out + out.transpose()) * 0.5)
}

pub fn accumulate(cov_prev: &Mat, cov_new: &Mat) -> Result<Mat> {
    if cov_prev.shape() != cov_new.shape() {
        return Err(LabError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            cov_prev.shape(),
            cov_new.shape()
        )));
    }
    Ok(cov_prev + cov_new)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    Vanilla,
    Forward,
    ForwardBackward,
}

impl ProjectionMode {
    pub fn label(&self) -> &'static str {
        match self {
            ProjectionMode::Vanilla => "vanilla",
            ProjectionMode::Forward => "forwardGP",
            ProjectionMode::ForwardBackward => "forward+backGP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(ProjectionMode::Vanilla),
            "forwardGP" | "forward" => Some(ProjectionMode::Forward),
            "forward+backGP" | "backGP" | "forward_backward" => {
                Some(ProjectionMode::ForwardBackward)
            }
            _ => None,
        }
    }
}

/// Per-layer projectors and the covariances they are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    pub forward: Vec<Mat>,
    pub backward: Vec<Mat>,
    pub forward_cov: Vec<Mat>,
    pub backward_cov: Vec<Mat>,
}

impl ProjectorSet {
    /// No past tasks: identity projectors and zero covariances.
    pub fn identity(d: usize, depth: usize) -> Self {
        ProjectorSet {
            forward: vec![Mat::identity(d, d); depth],
            backward: vec![Mat::identity(d, d); depth],
            forward_cov: vec![Mat::zeros(d, d); depth],
            backward_cov: vec![Mat::zeros(d, d); depth],
        }
    }

    /// Add the covariances of a finished task and rebuild the projectors.
    /// Backward projectors are only rebuilt when `eps_b` is given.
    pub fn absorb(&mut self, p: &DlnParams, task: &Task, eps_f: f64, eps_b: Option<f64>) -> Result<()> {
        for i in 1..=p.depth() {
            let k = i - 1;
            self.forward_cov[k] = accumulate(&self.forward_cov[k], &input_covariance(p, task, i)?)?;
            self.forward[k] = nullspace_projector(&self.forward_cov[k], eps_f)?;
            if let Some(eps_b) = eps_b {
                self.backward_cov[k] =
                    accumulate(&self.backward_cov[k], &output_grad_covariance(p, task, i)?)?;
                self.backward[k] = nullspace_projector(&self.backward_cov[k], eps_b)?;
            }
        }
        Ok(())
    }
}

/// `B_i G_i F_i` per layer; `Forward` uses `B = I` and `Vanilla` returns `g`.
pub fn project_update(g: &DlnParams, ps: &ProjectorSet, mode: ProjectionMode) -> DlnParams {
    match mode {
        ProjectionMode::Vanilla => g.clone(),
        ProjectionMode::Forward => g.map_layers(|i, w| w * &ps.forward[i]),
        ProjectionMode::ForwardBackward => {
            g.map_layers(|i, w| &ps.backward[i] * w * &ps.forward[i])
        }
    }
}

/// `|W W^T - I|_F^2`.
pub fn spectral_reg_loss(w: &Mat) -> f64 {
    (w * w.transpose() - Mat::identity(w.nrows(), w.nrows())).norm_squared()
}

/// Gradient of `|W W^T - I|_F^2`, namely `4 (W W^T - I) W`.
pub fn spectral_reg_grad(w: &Mat) -> Result<Mat> {
    if !w.is_square() {
        return Err(LabError::DimensionMismatch("spectral regularizer needs a square matrix".into()));
    }
    let d = w.nrows();
    Ok((w * w.transpose() - Mat::identity(d, d)) * w * 4.0)
}

/// `a[t][i]`: metric of task `i` after training task `t` (0-based, `i <= t`).
#[derive(Debug, Clone, PartialEq)]
pub struct AccMatrix {
    pub a: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClMetrics {
    pub acc: f64,
    pub bwt: f64,
    pub imm_acc: f64,
}

pub fn cl_metrics(m: &AccMatrix) -> Result<ClMetrics> {
    let t = m.a.len();
    if t < 2 {
        return Err(LabError::InvalidArgument("BWT needs at least two tasks".into()));
    }
    if m.a.iter().enumerate().any(|(k, row)| row.len() <= k) {
        return Err(LabError::DimensionMismatch("accuracy matrix rows too short".into()));
    }
    let tf = t as f64;
    let last = &m.a[t - 1];
    let acc = last[..t].iter().sum::<f64>() / tf;
    let bwt = (0..t - 1).map(|i| last[i] - m.a[i][i]).sum::<f64>() / (tf - 1.0);
    let imm_acc = (0..t).map(|i| m.a[i][i]).sum::<f64>() / tf;
    Ok(ClMetrics { acc, bwt, imm_acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClConfig {
    pub mode: ProjectionMode,
    pub train: TrainConfig,
    pub eps_forward: f64,
    pub eps_backward: f64,
    pub spectral_lambda: f64,
}

/// One recorded point while training task `task` (0-based, `task >= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClStep {
    pub task: usize,
    pub step: usize,
    /// Previous task's loss at the end of its own training.
    pub loss_old_min: f64,
    /// Alignment of the cumulative update on this task with the previous
    /// task's Hessian.
    pub alpha: f64,
    /// Previous task's loss increase since the end of its training.
    pub forget_old: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClResult {
    /// `loss[t][i]`: loss of task `i` after training task `t`.
    pub losses: Vec<Vec<f64>>,
    /// `exp(-loss)` analog of accuracy.
    pub acc: AccMatrix,
    /// Argmax accuracy, when every task has one-hot labels.
    pub class_acc: Option<AccMatrix>,
    pub steps: Vec<ClStep>,
    /// End-of-task alignment for tasks `1..T`.
    pub task_alpha: Vec<f64>,
    pub params: DlnParams,
}

fn one_hot_classes(labels: &Mat) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(labels.ncols());
    for col in labels.column_iter() {
        let ones: Vec<usize> = col.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(k, _)| k).collect();
        if ones.len() != 1 || col.iter().filter(|v| **v != 0.0).count() != 1 {
            return None;
        }
        out.push(ones[0]);
    }
    Some(out)
}

/// Fraction of samples whose output argmax matches the one-hot label.
pub fn argmax_accuracy(p: &DlnParams, task: &Task) -> Option<f64> {
    let classes = one_hot_classes(task.labels())?;
    if classes.is_empty() {
        return None;
    }
    let out = Products::new(p).full() * task.inputs();
    let hits = out
        .column_iter()
        .zip(&classes)
        .filter(|(c, k)| c.iamax() == **k)
        .count();
    Some(hits as f64 / classes.len() as f64)
}

fn objective(p: &DlnParams, task: &Task, l2: f64, spectral: f64) -> f64 {
    let prod = Products::new(p);
    let mut v = dln::data_loss_stats(prod.full(), task) + l2 * p.norm_sq();
    if spectral > 0.0 {
        v += spectral * p.weights().iter().map(spectral_reg_loss).sum::<f64>();
    }
    v
}

/// Gradient descent with the data gradient projected and the spectral
/// regularizer added after projection. Records `(epoch, params)` snapshots
/// every `record_every` epochs through `on_record`.
pub fn train_projected(
    p0: &DlnParams,
    task: &Task,
    cfg: &ClConfig,
    ps: &ProjectorSet,
    mut on_record: impl FnMut(usize, &DlnParams) -> Result<()>,
) -> Result<DlnParams> {
    cfg.train.validate()?;
    check_task(p0, task)?;
    let tc = &cfg.train;
    let mut p = p0.clone();
    let mut cur = objective(&p, task, tc.l2, cfg.spectral_lambda);
    if !cur.is_finite() {
        return Err(LabError::Divergence { last_finite_epoch: 0 });
    }
    let mut velocity = DlnParams::zeros(p.dim(), p.depth());
    for epoch in 0..tc.epochs {
        if tc.record_every > 0 && epoch % tc.record_every == 0 {
            on_record(epoch, &p)?;
        }
        let prod = Products::new(&p);
        let g = dln::grad_from_moments(&p, &prod, task.sxx(), task.syx(), tc.l2);
        let mut dir = project_update(&g, ps, cfg.mode);
        if cfg.spectral_lambda > 0.0 {
            let sr = DlnParams::new(
                p.weights()
                    .iter()
                    .map(|w| spectral_reg_grad(w).map(|m| m * cfg.spectral_lambda))
                    .collect::<Result<_>>()?,
            )?;
            dir = dir.add_scaled(1.0, &sr);
        }
        if dir.norm() <= tc.grad_tol {
            break;
        }
        let mut lr = tc.lr;
        let mut accepted = None;
        for _ in 0..=40 {
            let step = velocity.scaled(tc.momentum).add_scaled(-lr, &dir);
            let trial = p.add_scaled(1.0, &step);
            let tl = objective(&trial, task, tc.l2, cfg.spectral_lambda);
            if tl.is_finite() && tl < cur {
                accepted = Some((trial, tl, step));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((trial, tl, step)) => {
                p = trial;
                cur = tl;
                velocity = step;
            }
            None => break,
        }
    }
    if tc.record_every > 0 {
        on_record(tc.epochs, &p)?;
    }
    Ok(p)
}

/// Train on `tasks` in order from `p0`, refreshing projectors after each task.
pub fn cl_run(tasks: &[Task], p0: &DlnParams, cfg: &ClConfig) -> Result<ClResult> {
    if tasks.len() < 2 {
        return Err(LabError::InvalidArgument("a CL run needs at least two tasks".into()));
    }
    if cfg.mode != ProjectionMode::Vanilla
        && !(cfg.eps_forward > 0.0 && cfg.eps_forward < 1.0)
    {
        return Err(LabError::InvalidArgument("eps_forward must lie in (0,1)".into()));
    }
    if cfg.mode == ProjectionMode::ForwardBackward
        && !(cfg.eps_backward > 0.0 && cfg.eps_backward < 1.0)
    {
        return Err(LabError::InvalidArgument("eps_backward must lie in (0,1)".into()));
    }
    let (d, depth) = (p0.dim(), p0.depth());
    let mut ps = ProjectorSet::identity(d, depth);
    let mut p = p0.clone();
    let mut losses: Vec<Vec<f64>> = Vec::with_capacity(tasks.len());
    let mut steps = Vec::new();
    let mut task_alpha = Vec::new();
    let all_one_hot = tasks.iter().all(|t| one_hot_classes(t.labels()).is_some());
    let mut class_acc = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let start = p.clone();
        let prev = if t > 0 {
            let old = &tasks[t - 1];
            Some((old, CurvatureCtx::new(&start, old)?, dln::loss(&start, old, 0.0)?))
        } else {
            None
        };
        let record = |epoch: usize, q: &DlnParams| -> Result<()> {
            if let Some((old, ctx, base)) = &prev {
                let delta = q.sub(&start);
                let nsq = delta.norm_sq();
                let tr = ctx.trace_closed();
                let alpha = if nsq > 0.0 && tr > 0.0 {
                    alignment_alpha(delta.dot(&ctx.hvp(&delta)), tr, nsq, q.dim_theta())?.alpha
                } else {
                    f64::NAN
                };
                steps.push(ClStep {
                    task: t,
                    step: epoch,
                    loss_old_min: *base,
                    alpha,
                    forget_old: dln::loss(q, old, 0.0)? - base,
                });
            }
            Ok(())
        };
        p = train_projected(&start, task, cfg, &ps, record)?;
        if let Some((_, ctx, _)) = &prev {
            let delta = p.sub(&start);
            let nsq = delta.norm_sq();
            let tr = ctx.trace_closed();
            task_alpha.push(if nsq > 0.0 && tr > 0.0 {
                alignment_alpha(delta.dot(&ctx.hvp(&delta)), tr, nsq, p.dim_theta())?.alpha
            } else {
                f64::NAN
            });
        }
        losses.push(
            tasks[..=t]
                .iter()
                .map(|k| dln::loss(&p, k, 0.0))
                .collect::<Result<_>>()?,
        );
        if all_one_hot {
            class_acc.push(tasks[..=t].iter().map(|k| argmax_accuracy(&p, k).unwrap_or(0.0)).collect());
        }
        match cfg.mode {
            ProjectionMode::Vanilla => {}
            ProjectionMode::Forward => ps.absorb(&p, task, cfg.eps_forward, None)?,
            ProjectionMode::ForwardBackward => {
                ps.absorb(&p, task, cfg.eps_forward, Some(cfg.eps_backward))?
            }
        }
    }
    let acc = AccMatrix {
        a: losses.iter().map(|r| r.iter().map(|l| (-l).exp()).collect()).collect(),
    };
    Ok(ClResult {
        losses,
        acc,
        class_acc: all_one_hot.then_some(AccMatrix { a: class_acc }),
        steps,
        task_alpha,
        params: p,
    })
}
