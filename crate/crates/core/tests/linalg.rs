use cl_lab_core::linalg::*;
use cl_lab_core::rng::rng_from_seed;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn random_psd<R: Rng>(d: usize, rank: usize, rng: &mut R) -> Mat {
    let g = gaussian_matrix(d, rank, 1.0, rng);
    let s = &g * g.transpose();
    (&s + s.transpose()) * 0.5
}

fn random_sym<R: Rng>(d: usize, rng: &mut R) -> Mat {
    let g = gaussian_matrix(d, d, 1.0, rng);
    (&g + g.transpose()) * 0.5
}

fn within_sigma(mean: &Mat, se: &Mat, want: &Mat, k: f64) -> Result<(), String> {
    for r in 0..want.nrows() {
        for c in 0..want.ncols() {
            let err = (mean[(r, c)] - want[(r, c)]).abs();
            if err > k * se[(r, c)] + 1e-12 {
                return Err(format!(
                    "entry ({r},{c}): mean {} want {} se {}",
                    mean[(r, c)],
                    want[(r, c)],
                    se[(r, c)]
                ));
            }
        }
    }
    Ok(())
}

#[test]
fn haar_draws_are_orthogonal() {
    let mut rng = rng_from_seed(1);
    for d in [1, 2, 5, 9] {
        let u = haar_orthogonal(d, &mut rng);
        assert!((u.transpose() * &u - Mat::identity(d, d)).norm() < 1e-12);
    }
}

#[test]
fn haar_second_moment() {
    let mut rng = rng_from_seed(2);
    let d = 6;
    let a = random_sym(d, &mut rng);
    let (mean, se) = haar_matrix_moment(d, 10_000, &mut rng, |u| u.transpose() * &a * u);
    let want = Mat::identity(d, d) * (a.trace() / d as f64);
    within_sigma(&mean, &se, &want, 4.0).unwrap();
}

#[test]
fn haar_untransposed_moment() {
    let mut rng = rng_from_seed(3);
    let d = 5;
    let b = gaussian_matrix(d, d, 1.0, &mut rng);
    let (mean, se) = haar_matrix_moment(d, 10_000, &mut rng, |u| u * &b * u);
    within_sigma(&mean, &se, &(b.transpose() / d as f64), 4.0).unwrap();
}

#[test]
fn haar_fourth_moment() {
    let mut rng = rng_from_seed(4);
    for (d, rank) in [(4, 1), (5, 2), (6, 6)] {
        let a = random_psd(d, rank, &mut rng);
        let b = random_sym(d, &mut rng);
        let (p, q) = pq_fourth_moment_coeffs(effective_rank(&a).unwrap(), d).unwrap();
        let scale = frob_sq(&a) / d as f64;
        let want = (Mat::identity(d, d) * (p * b.trace()) + &b * q) * scale;
        let (mean, se) =
            haar_matrix_moment(d, 20_000, &mut rng, |s| s * &a * s.transpose() * &b * s * &a * s.transpose());
        within_sigma(&mean, &se, &want, 4.0).unwrap_or_else(|e| panic!("d={d} rank={rank}: {e}"));
    }
}

#[test]
fn pq_coefficient_examples() {
    for d in [2usize, 3, 7, 32] {
        let df = d as f64;
        assert_eq!(pq_fourth_moment_coeffs(df, d).unwrap(), (0.0, 1.0));
        let (p, q) = pq_fourth_moment_coeffs(1.0, d).unwrap();
        assert!((p - 1.0 / (df + 2.0)).abs() < 1e-15);
        assert!((q - 2.0 / (df + 2.0)).abs() < 1e-15);
    }
    assert!(pq_fourth_moment_coeffs(0.5, 4).is_err());
    assert!(pq_fourth_moment_coeffs(4.5, 4).is_err());
    assert!(pq_fourth_moment_coeffs(1.0, 1).is_err());
}

#[test]
fn effective_rank_examples() {
    assert!((effective_rank(&Mat::identity(7, 7)).unwrap() - 7.0).abs() < 1e-12);
    let mut rng = rng_from_seed(5);
    let v = gaussian_matrix(6, 1, 1.0, &mut rng);
    assert!((effective_rank(&(&v * v.transpose())).unwrap() - 1.0).abs() < 1e-10);
    assert!(effective_rank(&Mat::zeros(3, 3)).is_err());
    let sp = Spectrum::new(vec![1.0; 5]).unwrap();
    assert!((erank_of_powered_spectrum(&sp, 3.7).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn kronecker_erank_is_multiplicative() {
    let mut rng = rng_from_seed(6);
    for _ in 0..20 {
        let (da, db) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a = random_psd(da, rng.random_range(1..=da), &mut rng);
        let b = random_psd(db, rng.random_range(1..=db), &mut rng);
        let lhs = effective_rank(&kron(&a, &b)).unwrap();
        let rhs = effective_rank(&a).unwrap() * effective_rank(&b).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * rhs, "{lhs} vs {rhs}");
    }
}

#[test]
fn block_diag_erank_is_subadditive() {
    let mut rng = rng_from_seed(7);
    for _ in 0..50 {
        let blocks: Vec<Mat> = (0..rng.random_range(2..5))
            .map(|_| {
                let d = rng.random_range(1..=5);
                random_psd(d, rng.random_range(1..=d), &mut rng) * rng.random_range(0.01..10.0)
            })
            .collect();
        let total: f64 = blocks.iter().map(|b| effective_rank(b).unwrap()).sum();
        assert!(effective_rank(&block_diag(&blocks)).unwrap() <= total * (1.0 + 1e-12));
    }
}

fn pow_norm_sq(s: &[f64], a: f64) -> f64 {
    s.iter().map(|v| v.powf(2.0 * a)).sum()
}

#[test]
fn sandwich_inequality_on_random_spectra() {
    let mut rng = rng_from_seed(8);
    let mut violations = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
        let sp = Spectrum::new(s.clone()).unwrap();
        for a in 0..=6 {
            for b in 0..=6 {
                let mid = pow_norm_sq(&s, a as f64) * pow_norm_sq(&s, b as f64)
                    / pow_norm_sq(&s, (a + b) as f64);
                let lo = erank_of_powered_spectrum(&sp, 2.0 * a.max(b) as f64).unwrap();
                let hi = erank_of_powered_spectrum(&sp, 2.0 * a.min(b) as f64).unwrap();
                let tol = 1e-10 * hi;
                if lo > mid + tol || mid > hi + tol {
                    violations += 1;
                }
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn partitioned_norm_symmetric_and_convex() {
    let mut rng = rng_from_seed(9);
    for _ in 0..50 {
        let s: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
        let (a, b) = (rng.random_range(0..4) as f64, rng.random_range(4..9) as f64);
        let f = |x: f64| pow_norm_sq(&s, b - x) * pow_norm_sq(&s, x - a);
        for k in 0..=((b - a) as i32) {
            let x = a + k as f64;
            let mirror = a + b - x;
            assert!((f(x) - f(mirror)).abs() <= 1e-10 * f(x).max(f(mirror)));
            assert!(f(x - 1.0) + f(x + 1.0) >= 2.0 * f(x) * (1.0 - 1e-12));
        }
    }
}

#[test]
fn trace_bound_with_nested_nullspaces() {
    let mut rng = rng_from_seed(10);
    for _ in 0..50 {
        let d = rng.random_range(2..=7);
        let r = rng.random_range(1..=d);
        let a = random_psd(d, r, &mut rng);
        let (_, v) = eigh_psd(&a).unwrap();
        let basis = v.columns(0, r).into_owned();
        let inner = random_psd(r, r, &mut rng) + Mat::identity(r, r) * 0.1;
        let m = &basis * &inner * basis.transpose();
        let sv = singular_values(&inner).unwrap();
        let smin = *sv.values().last().unwrap();
        let t = (&a * &m).trace();
        let ta = a.trace();
        assert!(smin * ta <= t * (1.0 + 1e-10) && t <= sv.max() * ta * (1.0 + 1e-10));
    }
}

#[test]
fn pinv_examples() {
    let m = Mat::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
    let want = Mat::from_diagonal(&DVector::from_vec(vec![0.5, 0.0]));
    assert!((pinv(&m, 1e-9).unwrap() - want).norm() < 1e-15);
    let mut rng = rng_from_seed(11);
    let u = haar_orthogonal(5, &mut rng);
    assert!((pinv(&u, 1e-9).unwrap() - u.transpose()).norm() < 1e-12);
    let low = gaussian_matrix(6, 2, 1.0, &mut rng) * gaussian_matrix(2, 4, 1.0, &mut rng);
    let back = &low * pinv(&low, 1e-9).unwrap() * &low;
    assert!((back - &low).norm() <= 1e-8 * low.norm());
    assert!(pinv(&low, 0.0).is_err());
}

#[test]
fn psd_power_examples() {
    let m = Mat::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
    let want = Mat::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
    assert!((psd_power(&m, 0.5).unwrap() - want).norm() < 1e-12);
    let mut rng = rng_from_seed(12);
    let s = random_psd(5, 5, &mut rng);
    assert!((psd_power(&s, 2.0).unwrap() - &s * &s).norm() <= 1e-8 * (&s * &s).norm());
    assert!(psd_power(&s, -1.0).is_err());
}

#[test]
fn svd_convention_is_deterministic() {
    let mut rng = rng_from_seed(13);
    let m = gaussian_matrix(6, 6, 1.0, &mut rng);
    let a = svd(&m).unwrap();
    let b = svd(&m).unwrap();
    assert_eq!((&a.left, &a.right), (&b.left, &b.right));
    assert!((a.reconstruct() - &m).norm() < 1e-12);
    let vals = a.singular_values.values();
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    for col in a.left.column_iter() {
        let k = col.iamax();
        assert!(col[k] > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn erank_bounded_by_support(vals in prop::collection::vec(0.0f64..5.0, 1..10)) {
        prop_assume!(vals.iter().any(|v| *v > 1e-3));
        let sp = Spectrum::new(vals.clone()).unwrap();
        let e = erank_of_powered_spectrum(&sp, 1.0).unwrap();
        let support = vals.iter().filter(|v| **v > 0.0).count() as f64;
        prop_assert!(e >= 1.0 - 1e-12 && e <= support + 1e-12);
    }

    #[test]
    fn erank_spectrum_and_matrix_paths_agree(vals in prop::collection::vec(0.01f64..5.0, 1..8), p in 0.0f64..4.0) {
        let sp = Spectrum::new(vals).unwrap();
        let a = erank_of_powered_spectrum(&sp, p).unwrap();
        let b = effective_rank(&psd_power(&sp.to_diag(), p).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a);
    }

    #[test]
    fn erank_invariant_under_rotation_and_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = rng_from_seed(seed);
        let a = random_psd(5, 3, &mut rng);
        let u = haar_orthogonal(5, &mut rng);
        let rotated = &u * &a * u.transpose() * c;
        prop_assert!((effective_rank(&a).unwrap() - effective_rank(&rotated).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pq_coefficients_sum_rule(d in 2usize..64, t in 0.0f64..1.0) {
        let e = 1.0 + t * (d as f64 - 1.0);
        let (p, q) = pq_fourth_moment_coeffs(e, d).unwrap();
        prop_assert!((p * d as f64 + q - 1.0).abs() < 1e-12);
        prop_assert!(p >= 0.0 && q > 0.0 && q <= 1.0 + 1e-15);
    }
}
