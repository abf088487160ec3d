use cl_lab_core::curvature::*;
use cl_lab_core::data::{synth_teacher_task, Task, TaskMeta};
use cl_lab_core::dln::{grad, loss, train, DlnParams, TrainConfig};
use cl_lab_core::linalg::{gaussian_matrix, haar_orthogonal, Mat};
use cl_lab_core::rng::rng_from_seed;
use cl_lab_core::stats::RunningStats;
use nalgebra::DVector;
use proptest::prelude::*;

fn instance(d: usize, l: usize, seed: u64) -> (DlnParams, Task) {
    let mut rng = rng_from_seed(seed);
    let task = synth_teacher_task(d, 4 * d, (d / 2).max(1), 0.3, &mut rng).unwrap();
    (DlnParams::random_init(d, l, 1.0, &mut rng), task)
}

fn fd_hvp(p: &DlnParams, task: &Task, v: &DlnParams) -> DlnParams {
    let h = 1e-5;
    let gp = grad(&p.add_scaled(h, v), task, 0.0).unwrap();
    let gm = grad(&p.add_scaled(-h, v), task, 0.0).unwrap();
    gp.sub(&gm).scaled(0.5 / h)
}

#[test]
fn gradient_matches_finite_differences() {
    for (d, l, lambda) in [(5, 3, 0.0), (4, 1, 0.1), (6, 2, 1e-3), (3, 4, 0.05)] {
        let (p, t) = instance(d, l, 10 + l as u64);
        let g = grad(&p, &t, lambda).unwrap().to_vector();
        let x = p.to_vector();
        let h = 1e-6;
        let mut fd = DVector::zeros(x.len());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let lp = loss(&DlnParams::from_vector(d, l, &xp).unwrap(), &t, lambda).unwrap();
            let lm = loss(&DlnParams::from_vector(d, l, &xm).unwrap(), &t, lambda).unwrap();
            fd[k] = (lp - lm) / (2.0 * h);
        }
        let rel = (&g - &fd).norm() / g.norm();
        assert!(rel <= 1e-6, "d={d} L={l}: rel err {rel}");
    }
}

#[test]
fn l1_gradient_is_residual_times_inputs() {
    let (p, t) = instance(4, 1, 3);
    let g = grad(&p, &t, 0.0).unwrap();
    let want = (p.layer(1) * t.inputs() - t.labels()) * t.inputs().transpose();
    assert!((g.layer(1) - want).norm() < 1e-10);
}

#[test]
fn hvp_matches_finite_differences() {
    for (d, l) in [(6, 3), (4, 4), (8, 2), (5, 1)] {
        let (p, t) = instance(d, l, 40 + d as u64);
        let mut rng = rng_from_seed(7);
        let v = DlnParams::random_init(d, l, 1.0, &mut rng);
        let hv = hvp(&p, &t, &v).unwrap();
        let fd = fd_hvp(&p, &t, &v);
        let rel = hv.sub(&fd).norm() / hv.norm();
        assert!(rel <= 1e-5, "d={d} L={l}: rel err {rel}");
    }
}

#[test]
fn l1_hvp_is_v_times_input_covariance() {
    let (p, t) = instance(5, 1, 2);
    let mut rng = rng_from_seed(1);
    let v = DlnParams::random_init(5, 1, 1.0, &mut rng);
    let hv = hvp(&p, &t, &v).unwrap();
    assert!((hv.layer(1) - v.layer(1) * t.sxx()).norm() < 1e-12);
    let z = hvp(&p, &t, &DlnParams::zeros(5, 1)).unwrap();
    assert_eq!(z.norm_sq(), 0.0);
}

#[test]
fn hessian_is_symmetric_and_trace_agrees() {
    let (p, t) = instance(4, 3, 5);
    let h = hessian_full(&p, &t).unwrap();
    let asym = (&h - h.transpose()).norm() / h.norm();
    assert!(asym <= 1e-8, "asymmetry {asym}");
    let closed = hessian_trace_closed(&p, &t).unwrap();
    assert!((h.trace() - closed).abs() <= 1e-8 * closed.abs());
}

#[test]
fn l1_hessian_is_kronecker_of_covariance() {
    let (p, t) = instance(3, 1, 6);
    let h = hessian_full(&p, &t).unwrap();
    // column-major vec(V X X^T) = (XX^T kron I) vec(V)
    let want = t.sxx().kronecker(&Mat::identity(3, 3));
    assert!((h - want).norm() < 1e-10);
    let mut rng = rng_from_seed(2);
    let x = gaussian_matrix(3, 3, 1.0, &mut rng);
    let sq = Task::new(x.clone(), x.clone(), TaskMeta::default()).unwrap();
    let tr = hessian_trace_closed(&p, &sq).unwrap();
    assert!((tr - 3.0 * x.norm_squared()).abs() < 1e-10);
}

#[test]
fn trace_of_zero_weights() {
    let mut rng = rng_from_seed(3);
    let t = synth_teacher_task(4, 8, 2, 0.0, &mut rng).unwrap();
    let p = DlnParams::zeros(4, 3);
    let h = hessian_full(&p, &t).unwrap();
    assert!(h.trace().abs() < 1e-14);
    assert_eq!(hessian_trace_closed(&p, &t).unwrap(), 0.0);
    let p = DlnParams::zeros(4, 1);
    assert!((hessian_trace_closed(&p, &t).unwrap() - 16.0).abs() < 1e-10);
}

#[test]
fn hessian_size_cap() {
    let p = DlnParams::zeros(50, 3);
    let mut rng = rng_from_seed(1);
    let t = synth_teacher_task(50, 60, 2, 0.0, &mut rng).unwrap();
    assert!(matches!(hessian_full(&p, &t), Err(cl_lab_core::LabError::TooLarge(7500))));
}

#[test]
fn hutchinson_within_four_sigma() {
    let (p, t) = instance(5, 2, 8);
    let mut rng = rng_from_seed(11);
    let (est, se) = hessian_trace_hutchinson(&p, &t, 512, &mut rng).unwrap();
    let closed = hessian_trace_closed(&p, &t).unwrap();
    assert!((est - closed).abs() <= 4.0 * se, "{est} vs {closed} (se {se})");
    let zero = DlnParams::zeros(5, 3);
    let (z, _) = hessian_trace_hutchinson(&zero, &t, 4, &mut rng).unwrap();
    assert_eq!(z, 0.0);
}

#[test]
fn hutchinson_identity_fixture() {
    let d = 6;
    let x = Mat::identity(d, d);
    let t = Task::new(x.clone(), x, TaskMeta { whitened: true, ..Default::default() }).unwrap();
    let p = DlnParams::identity(d, 1);
    let mut rng = rng_from_seed(5);
    let (est, se) = hessian_trace_hutchinson(&p, &t, 1000, &mut rng).unwrap();
    // H = I, so every Rademacher probe returns exactly d^2
    assert!((est - (d * d) as f64).abs() <= 4.0 * se + 1e-9);
}

fn mc_check(d: usize, l: usize, seed: u64, n: usize) {
    let mut rng = rng_from_seed(seed);
    let t = synth_teacher_task(d, 2 * d, (d / 3).max(1), 0.0, &mut rng).unwrap();
    let p = DlnParams::random_init(d, l, 1.0, &mut rng);
    let m = rotation_moments(&p, &t, n, &mut rng).unwrap();
    let gn = grad_norm_expected_closed(&p, &t).unwrap();
    let ghg = ghg_expected_closed(&p, &t).unwrap();
    let zn = (m.norm_sq.mean() - gn) / m.norm_sq.std_err();
    let zq = (m.quad.mean() - ghg) / m.quad.std_err();
    assert!(zn.abs() <= 5.0, "(d={d},L={l}) |g|^2 z = {zn}");
    assert!(zq.abs() <= 5.0, "(d={d},L={l}) gHg z = {zq}");
}

#[test]
fn closed_forms_match_monte_carlo() {
    mc_check(8, 1, 1, 2000);
    mc_check(6, 2, 2, 2000);
    mc_check(5, 3, 3, 2000);
}

#[test]
fn closed_form_zero_weight_l1() {
    let mut rng = rng_from_seed(4);
    let t = synth_teacher_task(6, 12, 3, 0.0, &mut rng).unwrap();
    let p = DlnParams::zeros(6, 1);
    let gn = grad_norm_expected_closed(&p, &t).unwrap();
    assert!((gn - t.syx().norm_squared()).abs() < 1e-10);
}

#[test]
fn closed_forms_require_whitening() {
    let mut rng = rng_from_seed(4);
    let x = gaussian_matrix(3, 10, 1.0, &mut rng);
    let t = Task::new(x.clone(), x, TaskMeta::default()).unwrap();
    let p = DlnParams::identity(3, 2);
    assert!(grad_norm_expected_closed(&p, &t).is_err());
    assert!(ghg_expected_closed(&p, &t).is_err());
}

#[test]
fn monte_carlo_single_rotation_is_deterministic_alpha() {
    let (p, t) = instance(5, 2, 12);
    let mut rng = rng_from_seed(99);
    let mc = expected_alpha_monte_carlo(&p, &t, 1, &mut rng).unwrap();
    let mut rng = rng_from_seed(99);
    let u = haar_orthogonal(5, &mut rng);
    let det = alpha_for_rotation(&p, &t, &u).unwrap();
    assert!((mc.alpha - det.alpha).abs() <= 1e-10 * det.alpha.abs());
}

#[test]
fn interpolating_model_has_small_residual_term() {
    let mut rng = rng_from_seed(21);
    let t = synth_teacher_task(6, 24, 2, 0.0, &mut rng).unwrap();
    let p0 = DlnParams::random_init(6, 2, 1.0, &mut rng);
    let cfg = TrainConfig { lr: 0.5, l2: 0.0, epochs: 3000, ..Default::default() };
    let (p, _) = train(&p0, &t, &cfg).unwrap();
    let rec = alpha_closed(&p, &t).unwrap();
    let mc = expected_alpha_monte_carlo(&p, &t, 1000, &mut rng).unwrap();
    let se = match mc.estimator {
        Estimator::MonteCarlo { std_err, .. } => std_err,
        _ => unreachable!(),
    };
    assert!((mc.alpha - rec.alpha).abs() <= 5.0 * se, "{} vs {}", mc.alpha, rec.alpha);
}

#[test]
fn random_direction_alpha_is_one() {
    let (p, t) = instance(5, 2, 31);
    let ctx = CurvatureCtx::new(&p, &t).unwrap();
    let n = p.dim_theta();
    let mut rng = rng_from_seed(3);
    let mut q = RunningStats::new();
    let mut nn = RunningStats::new();
    for _ in 0..4000 {
        let r = DlnParams::random_init(5, 2, 1.0 / (n as f64).sqrt() * (5f64).sqrt(), &mut rng);
        q.push(r.dot(&ctx.hvp(&r)));
        nn.push(r.norm_sq());
    }
    // E[r^T H r] / (tr(H) / dim) with r ~ N(0, I / dim)
    let tr = ctx.trace_closed();
    let scaled = q.mean() * n as f64 / tr;
    let se = q.std_err() * n as f64 / tr;
    assert!((scaled - 1.0).abs() <= 4.0 * se, "{scaled} +- {se}");
}

#[test]
fn lanczos_full_matches_exact_cdf() {
    let (p, t) = instance(4, 2, 17);
    let h = hessian_full(&p, &t).unwrap();
    let mut rng = rng_from_seed(2);
    let v = DVector::from_fn(p.dim_theta(), |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
    let v = &v / v.norm();
    let ctx = CurvatureCtx::new(&p, &t).unwrap();
    let lz = lanczos(|x| ctx.hvp_vector(x), &v, p.dim_theta()).unwrap();
    let ex = RitzSpectrum::exact(&h, &v).unwrap();
    let sigma = 1e-3 * ex.scale();
    let grid = projection_cdf(&ex, sigma, 2000).unwrap();
    let sup = grid
        .iter()
        .map(|(x, c)| (c - lz.smooth_cdf(sigma, *x)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 1e-6, "sup {sup}");
    assert!((lz.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn lanczos_ignores_orthogonal_eigenvector() {
    let lam = DVector::from_vec(vec![4.0, 2.0, 1.0]);
    let start = DVector::from_vec(vec![0.0, 0.6, 0.8]);
    let s = lanczos(|v| lam.component_mul(v), &start, 3).unwrap();
    let w4: f64 = s
        .nodes
        .iter()
        .zip(&s.weights)
        .filter(|(n, _)| (**n - 4.0).abs() < 1e-6)
        .map(|(_, w)| w)
        .sum();
    assert!(w4 < 1e-12);
}

#[test]
fn cdf_uniform_weights_have_equal_steps() {
    let s = RitzSpectrum { nodes: vec![1.0, 2.0, 3.0, 4.0], weights: vec![0.25; 4], broaden_sigma: 1e-3 };
    for k in 0..4 {
        let t = 1.5 + k as f64;
        assert!((s.smooth_cdf(1e-3, t) - 0.25 * (k + 1) as f64).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_linear_and_symmetric(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (p, t) = instance(4, 3, seed);
        let mut rng = rng_from_seed(seed + 1);
        let v = DlnParams::random_init(4, 3, 1.0, &mut rng);
        let w = DlnParams::random_init(4, 3, 1.0, &mut rng);
        let ctx = CurvatureCtx::new(&p, &t).unwrap();
        let lhs = ctx.hvp(&v.scaled(a).add_scaled(b, &w));
        let rhs = ctx.hvp(&v).scaled(a).add_scaled(b, &ctx.hvp(&w));
        prop_assert!(lhs.sub(&rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        let vhw = v.dot(&ctx.hvp(&w));
        let whv = w.dot(&ctx.hvp(&v));
        prop_assert!((vhw - whv).abs() <= 1e-8 * (vhw.abs() + whv.abs() + 1e-12));
    }

    #[test]
    fn alpha_is_scale_invariant(q in 0.1f64..10.0, tr in 0.1f64..10.0, n in 0.1f64..10.0, c in 0.01f64..100.0) {
        let a = alignment_alpha(q, tr, n, 12).unwrap().alpha;
        prop_assert!((alignment_alpha(c * q, c * tr, n, 12).unwrap().alpha - a).abs() <= 1e-12 * a);
        prop_assert!((alignment_alpha(c * c * q, tr, c * c * n, 12).unwrap().alpha - a).abs() <= 1e-12 * a);
    }
}

#[test]
fn density_threshold_matches_uniform_eigenvalues() {
    let eigs = vec![5.0, 3.0, 1.0, 0.5, 0.25, -0.1];
    let spec = RitzSpectrum {
        nodes: eigs.clone(),
        weights: vec![1.0 / 6.0; 6],
        broaden_sigma: 0.1,
    };
    for frac in [0.05, 0.1, 0.5, 0.9, 1.0] {
        assert_eq!(top_trace_threshold_density(&spec, frac), top_trace_threshold(&eigs, frac));
    }
}
