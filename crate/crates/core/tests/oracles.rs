//! Library results checked against independently computed reference values.

use oed_core::divergence::GaussianDist;
use oed_core::eig::{eig, eig_error_example1, EigRules};
use oed_core::models::{heat_observe, ForwardModel, HeatConfig, PriorSpec};
use oed_core::quadrature::{gauss_hermite, gauss_legendre, tensor_all};
use oed_core::stability::{argmax_on_grid, rate_fit, DesignGrid};
use oed_core::surrogate::{build_pce, build_sparse_multilinear, Truncation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trapezoid_sum(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let w = if k == 0 || k + 1 == n { 0.5 } else { 1.0 };
            w * f(a + k as f64 * h)
        })
        .sum::<f64>()
        * h
}

fn normal_pdf(z: f64, var: f64) -> f64 {
    (-0.5 * z * z / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

// I(X; Y) = H(Y) − H(Y | X) by brute-force 1D integration
fn mutual_information_1d(g: impl Fn(f64) -> f64 + Copy, var: f64) -> f64 {
    let p_y = |y: f64| trapezoid_sum(|x| normal_pdf(x, 1.0) * normal_pdf(y - g(x), var), -9.0, 9.0, 3601);
    let h_y = -trapezoid_sum(
        |y| {
            let p = p_y(y);
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        },
        -14.0,
        14.0,
        2801,
    );
    let h_y_x = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
    h_y - h_y_x
}

#[test]
fn nonlinear_scalar_eig_matches_brute_force_entropy() {
    let var = 0.25;
    let g = |x: f64| x.sin() + 0.5 * x;
    let model = ForwardModel::custom("sin_plus_linear", 1, 0, 1, move |x, _| vec![g(x[0])]);
    let rules = EigRules::new(
        PriorSpec::standard_normal(1).quadrature(80).unwrap(),
        gauss_hermite(60).unwrap(),
    );
    let noise = GaussianDist::isotropic(1, var).unwrap();
    let nested = eig(&model, &[], &rules, &noise).unwrap().value;
    let oracle = mutual_information_1d(g, var);
    assert!((nested - oracle).abs() < 1e-5, "nested {nested} vs brute force {oracle}");
}

#[test]
fn linear_gaussian_eig_matches_determinant_formula() {
    let a = [[1.0, 0.5], [0.2, 1.0]];
    let c0 = [[1.0, 0.3], [0.3, 0.5]];
    let gamma = [[0.5, 0.1], [0.1, 0.4]];
    // S = Γ + A C₀ Aᵀ, EIG = ½ log(det S / det Γ)
    let mut ac = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ac[i][j] = (0..2).map(|k| a[i][k] * c0[k][j]).sum();
        }
    }
    let mut s = gamma;
    for i in 0..2 {
        for j in 0..2 {
            s[i][j] += (0..2).map(|k| ac[i][k] * a[j][k]).sum::<f64>();
        }
    }
    let det = |m: [[f64; 2]; 2]| m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let oracle = 0.5 * (det(s) / det(gamma)).ln();

    let model = ForwardModel::linear(a.iter().map(|r| r.to_vec()).collect()).unwrap();
    let prior = PriorSpec::Gaussian {
        mean: vec![0.0, 0.0],
        cov: c0.iter().map(|r| r.to_vec()).collect(),
    };
    let rules = EigRules::new(
        prior.quadrature(24).unwrap(),
        tensor_all(&[gauss_hermite(24).unwrap(), gauss_hermite(24).unwrap()]).unwrap(),
    );
    let noise = GaussianDist::from_rows(vec![0.0, 0.0], &gamma.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let nested = eig(&model, &[], &rules, &noise).unwrap().value;
    assert!((nested - oracle).abs() < 1e-6, "nested {nested} vs closed form {oracle}");
}

#[test]
fn example1_error_and_bracket() {
    for a_n in [1.5, 1.25, 1.125, 1.0625] {
        let exact = 0.5 * ((a_n * a_n + 1.0) / 2.0_f64).ln();
        assert!((eig_error_example1(1.0, a_n) - exact).abs() < 1e-15);
        let lo = (a_n - 1.0) * (a_n + 1.0) / (2.0 * (a_n * a_n + 1.0));
        let hi = (a_n - 1.0) * (a_n + 1.0) / 4.0;
        assert!(lo <= exact && exact <= hi);
    }
}

#[test]
fn heat_sensor_reciprocity() {
    let cfg = HeatConfig::default();
    // interior points; near the boundary the truncated source mass breaks
    // reciprocity between a smooth source and a point sensor
    let pairs = [
        ([0.3, 0.5], [0.5, 0.3]),
        ([0.25, 0.25], [0.8, 0.6]),
        ([0.31, 0.43], [0.71, 0.22]),
        ([0.62, 0.37], [0.4, 0.75]),
    ];
    for (x, d) in pairs {
        let a = heat_observe(&x, &d, &cfg).unwrap();
        let b = heat_observe(&d, &x, &cfg).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-3 * u.abs().max(v.abs()), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn sparse_interpolant_reproduces_multilinear_functions() {
    let f = |z: &[f64]| 1.0 + 2.0 * z[0] - 0.5 * z[1] * z[2] + z[0] * z[2];
    let model = ForwardModel::custom("multilinear", 1, 2, 1, move |x, d| vec![f(&[x[0], d[0], d[1]])]);
    let lower = [0.0, 0.2, 0.2];
    let upper = [1.0, 1.0, 1.0];
    let s = build_sparse_multilinear(&model, 3, &lower, &upper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let z: Vec<f64> = (0..3).map(|k| rng.gen_range(lower[k]..upper[k])).collect();
        let v = oed_core::surrogate::eval_surrogate(&s, &z[..1], &z[1..]).unwrap()[0];
        assert!((v - f(&z)).abs() < 1e-12, "{z:?}");
    }
}

#[test]
fn chaos_reproduces_low_degree_polynomials() {
    let f = |z: &[f64]| 0.3 + z[0] * z[0] * z[1] - 2.0 * z[2].powi(3) + z[0] * z[2];
    let model = ForwardModel::custom("cubic", 1, 2, 1, move |x, d| vec![f(&[x[0], d[0], d[1]])]);
    let lower = [0.0; 3];
    let upper = [1.0; 3];
    let rule = tensor_all(&vec![gauss_legendre(6, 0.0, 1.0).unwrap(); 3]).unwrap();
    let s = build_pce(&model, 3, Truncation::TotalDegree, &rule, &lower, &upper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = oed_core::surrogate::eval_surrogate(&s, &z[..1], &z[1..]).unwrap()[0];
        assert!((v - f(&z)).abs() < 1e-12, "{z:?}: {v} vs {}", f(&z));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rate_fit_recovers_power_laws(c in 1e-3f64..1e3, p in 0.2f64..4.0, q in 0usize..4) {
        let ns = [3.0, 6.0, 12.0, 24.0, 48.0];
        let e: Vec<f64> = ns.iter().map(|n: &f64| c * n.powf(-p) * n.ln().powi(q as i32)).collect();
        let fit = rate_fit(&ns, &e, q as f64, 0.0).unwrap();
        prop_assert!((fit.slope + p).abs() < 1e-10);
        prop_assert!(fit.residual < 1e-10);
    }

    #[test]
    fn scalar_linear_eig_is_half_log_snr(a in -2.0f64..2.0, var in 0.5f64..4.0) {
        let rules = EigRules::new(
            PriorSpec::standard_normal(1).quadrature(48).unwrap(),
            gauss_hermite(48).unwrap(),
        );
        let noise = GaussianDist::isotropic(1, var).unwrap();
        let u = eig(&ForwardModel::scalar_linear(a), &[0.0], &rules, &noise).unwrap().value;
        prop_assert!((u - 0.5 * (1.0 + a * a / var).ln()).abs() < 1e-8);
    }

    #[test]
    fn argmax_returns_a_maximal_grid_point(values in prop::collection::vec(-5i32..5, 16)) {
        let grid = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 4).unwrap();
        let v: Vec<f64> = values.iter().map(|&k| k as f64).collect();
        let (k, d) = argmax_on_grid(&v, &grid).unwrap();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(v[k], max);
        prop_assert!(v[..k].iter().all(|x| *x < max));
        prop_assert_eq!(&d, &grid.points()[k]);
    }
}
