//! Gaussian divergences and Hellinger diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ObservationMap;
use crate::numeric::CompensatedSum;
use crate::quadrature::QuadratureRule;

/// A multivariate normal law with a cached lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
    logdet: f64,
}

/// Plain serialized form: `{ "mean": [...], "cov": [[...], ...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if p == 0 {
            return Err(Error::InvalidDimension("Gaussian of dimension zero".into()));
        }
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: cov.nrows(),
                context: "covariance size",
            });
        }
        if cov.iter().chain(&mean).any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entry"));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..p {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSymmetric("covariance"));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or(Error::NotPositiveDefinite("covariance"))?;
        let factor = chol.l();
        let logdet = 2.0 * factor.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !logdet.is_finite() {
            return Err(Error::NotPositiveDefinite("covariance is singular"));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            factor,
            logdet,
        })
    }

    pub fn from_rows(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<Self> {
        let p = mean.len();
        if cov.len() != p || cov.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: cov.len(),
                context: "covariance rows",
            });
        }
        Self::new(mean, DMatrix::from_fn(p, p, |i, j| cov[i][j]))
    }

    pub fn from_spec(spec: &GaussianSpec) -> Result<Self> {
        Self::from_rows(spec.mean.clone(), &spec.cov)
    }

    pub fn to_spec(&self) -> GaussianSpec {
        let p = self.dim();
        GaussianSpec {
            mean: self.mean.iter().copied().collect(),
            cov: (0..p).map(|i| (0..p).map(|j| self.cov[(i, j)]).collect()).collect(),
        }
    }

    /// `N(0, variance * I_p)`.
    pub fn isotropic(p: usize, variance: f64) -> Result<Self> {
        Self::new(vec![0.0; p], DMatrix::identity(p, p) * variance)
    }

    pub fn standard(p: usize) -> Result<Self> {
        Self::isotropic(p, 1.0)
    }

    /// Zero-mean Gaussian with diagonal covariance.
    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(
            vec![0.0; variances.len()],
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular `L` with `L Lᵀ = cov`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    fn check_len(&self, got: usize, context: &'static str) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
                context,
            });
        }
        Ok(())
    }

    /// `L⁻¹ v` by forward substitution.
    pub fn whiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len(), "vector to whiten")?;
        let mut out = v.to_vec();
        self.whiten_in_place(&mut out);
        Ok(out)
    }

    pub(crate) fn whiten_in_place(&self, v: &mut [f64]) {
        let l = &self.factor;
        for i in 0..v.len() {
            let mut s = v[i];
            for j in 0..i {
                s -= l[(i, j)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
    }

    /// `mean + L e`.
    pub fn color(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_len(e.len(), "standard normal vector")?;
        let p = self.dim();
        Ok((0..p)
            .map(|i| self.mean[i] + (0..=i).map(|j| self.factor[(i, j)] * e[j]).sum::<f64>())
            .collect())
    }
}

/// `vᵀ Γ⁻¹ v` through one triangular solve.
pub fn weighted_norm_sq(v: &[f64], noise: &GaussianDist) -> Result<f64> {
    let w = noise.whiten(v)?;
    Ok(w.iter().map(|c| c * c).sum())
}

/// `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
            context: "kl_gaussian",
        });
    }
    let n = p.dim();
    let m = q
        .factor
        .solve_lower_triangular(&p.factor)
        .ok_or(Error::NotPositiveDefinite("second argument of kl_gaussian"))?;
    let trace = m.norm_squared();
    let dm: Vec<f64> = (0..n).map(|i| q.mean[i] - p.mean[i]).collect();
    let maha = weighted_norm_sq(&dm, q)?;
    let kl = 0.5 * (trace - n as f64 + maha + q.logdet - p.logdet);
    Ok(kl.max(0.0))
}

/// `E_{μ₀}[KL(π_N(·|x) ‖ π(·|x))] = ½ E_{μ₀} ‖G − G_N‖²_Γ` at design `d`.
///
/// Prior weights are normalized by the nominal mass of the rule's measure.
pub fn expected_likelihood_kl(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    d: &[f64],
    prior_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<f64> {
    Ok(0.5 * expected_sq_distance(model, surrogate, d, prior_rule, noise)?)
}

/// `E_{μ₀} ‖G(X; d) − G_N(X; d)‖²_Γ`.
pub fn expected_sq_distance(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    d: &[f64],
    prior_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<f64> {
    for (m, what) in [(model, "model output"), (surrogate, "surrogate output")] {
        if m.data_dim() != noise.dim() {
            return Err(Error::DimensionMismatch {
                expected: noise.dim(),
                got: m.data_dim(),
                context: what,
            });
        }
    }
    let weights = prior_rule.probability_weights();
    let mut acc = CompensatedSum::new();
    for (x, w) in prior_rule.nodes().zip(&weights) {
        let g = model.observe(x, d)?;
        let gn = surrogate.observe(x, d)?;
        let mut diff: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        noise.whiten_in_place(&mut diff);
        acc.add(w * diff.iter().map(|c| c * c).sum::<f64>());
    }
    Ok(acc.value())
}

/// Squared Hellinger distance `½ ∫ (√p − √q)²` for densities given by their
/// logarithms. `-inf` log-densities are allowed (zero density).
pub fn hellinger_sq_numeric_1d<P, Q>(logp: P, logq: Q, rule: &QuadratureRule) -> Result<f64>
where
    P: Fn(f64) -> f64,
    Q: Fn(f64) -> f64,
{
    if rule.dim() != 1 {
        return Err(Error::InvalidDimension("hellinger rule must be one dimensional".into()));
    }
    let mut acc = CompensatedSum::new();
    for (k, (x, w)) in rule.nodes().zip(rule.weights()).enumerate() {
        let (lp, lq) = (logp(x[0]), logq(x[0]));
        if lp.is_nan() || lq.is_nan() || lp == f64::INFINITY || lq == f64::INFINITY {
            return Err(Error::NonFiniteDensity { index: k });
        }
        let diff = (0.5 * lp).exp() - (0.5 * lq).exp();
        acc.add(w * diff * diff);
    }
    Ok((0.5 * acc.value()).clamp(0.0, 1.0))
}

/// Log-density of `N(mean, var)` in one dimension.
pub fn log_normal_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + (2.0 * std::f64::consts::PI * var).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ForwardModel, PriorSpec};
    use crate::quadrature::{gauss_hermite, trapezoid};
    use approx::assert_relative_eq;

    fn n1(m: f64, v: f64) -> GaussianDist {
        GaussianDist::new(vec![m], DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn construction_rejects_bad_covariances() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            GaussianDist::new(vec![0.0; 2], asym),
            Err(Error::NotSymmetric(_))
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianDist::new(vec![0.0; 2], indef),
            Err(Error::NotPositiveDefinite(_))
        ));
        let g = GaussianDist::diagonal(&[4.0, 9.0]).unwrap();
        assert_relative_eq!(g.logdet(), 36f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = n1(0.0, 1.0);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert_relative_eq!(kl_gaussian(&p, &n1(1.0, 1.0)).unwrap(), 0.5, epsilon = 1e-15);
        let closed = kl_gaussian(&p, &n1(0.0, 4.0)).unwrap();
        assert_relative_eq!(closed, 0.5 * (0.25 - 1.0 + 4f64.ln()), epsilon = 1e-15);

        // numeric oracle on [-12, 12]
        let rule = trapezoid(200_001, -12.0, 12.0).unwrap();
        let oracle = rule
            .integrate(|x| {
                let lp = log_normal_pdf_1d(x[0], 0.0, 1.0);
                let lq = log_normal_pdf_1d(x[0], 0.0, 4.0);
                lp.exp() * (lp - lq)
            })
            .unwrap();
        assert!((closed - oracle).abs() < 1e-9, "{closed} vs {oracle}");
        assert!((closed - 0.31814).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let a = GaussianDist::standard(2).unwrap();
        let b = GaussianDist::standard(3).unwrap();
        assert!(matches!(kl_gaussian(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weighted_norm_examples() {
        let id = GaussianDist::standard(2).unwrap();
        assert_eq!(weighted_norm_sq(&[0.0, 0.0], &id).unwrap(), 0.0);
        assert_eq!(weighted_norm_sq(&[3.0, 4.0], &id).unwrap(), 25.0);
        assert_eq!(weighted_norm_sq(&[2.0], &n1(0.0, 4.0)).unwrap(), 1.0);
        assert!(weighted_norm_sq(&[1.0], &id).is_err());
    }

    #[test]
    fn whiten_and_color_are_inverse() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = GaussianDist::new(vec![0.0, 0.0], cov).unwrap();
        let v = [0.7, -1.3];
        let back = g.color(&g.whiten(&v).unwrap()).unwrap();
        assert_relative_eq!(back[0], v[0], epsilon = 1e-14);
        assert_relative_eq!(back[1], v[1], epsilon = 1e-14);
    }

    #[test]
    fn hellinger_examples() {
        let rule = trapezoid(40_001, -20.0, 20.0).unwrap();
        let same = hellinger_sq_numeric_1d(
            |x| log_normal_pdf_1d(x, 0.0, 1.0),
            |x| log_normal_pdf_1d(x, 0.0, 1.0),
            &rule,
        )
        .unwrap();
        assert_eq!(same, 0.0);
        let h = hellinger_sq_numeric_1d(
            |x| log_normal_pdf_1d(x, 0.0, 1.0),
            |x| log_normal_pdf_1d(x, 1.0, 1.0),
            &rule,
        )
        .unwrap();
        assert!((h - (1.0 - (-0.125f64).exp())).abs() < 1e-10);

        // disjoint boxes; nodes avoid the box edges
        let rule = trapezoid(3001, -0.5, 3.5).unwrap();
        let ind = |lo: f64, hi: f64| move |x: f64| if x > lo && x < hi { 0.0 } else { f64::NEG_INFINITY };
        let h = hellinger_sq_numeric_1d(ind(0.0, 1.0), ind(2.0, 3.0), &rule).unwrap();
        assert!((h - 1.0).abs() < 2e-3, "{h}");
    }

    #[test]
    fn hellinger_rejects_nan() {
        let rule = trapezoid(5, 0.0, 1.0).unwrap();
        assert!(matches!(
            hellinger_sq_numeric_1d(|_| f64::NAN, |_| 0.0, &rule),
            Err(Error::NonFiniteDensity { index: 0 })
        ));
    }

    #[test]
    fn expected_kl_examples() {
        let noise = GaussianDist::standard(1).unwrap();
        let prior = PriorSpec::standard_normal(1).quadrature(64).unwrap();
        let g = ForwardModel::scalar_linear(1.0);
        assert_eq!(expected_likelihood_kl(&g, &g, &[0.0], &prior, &noise).unwrap(), 0.0);
        let gn = ForwardModel::scalar_linear(1.3);
        let v = expected_likelihood_kl(&g, &gn, &[0.0], &prior, &noise).unwrap();
        assert_relative_eq!(v, 0.5 * 0.09, epsilon = 1e-13);
        let bad = GaussianDist::standard(2).unwrap();
        assert!(expected_likelihood_kl(&g, &gn, &[0.0], &prior, &bad).is_err());
    }

    #[test]
    fn gh_rule_reproduces_gaussian_kl_identity() {
        let rule = gauss_hermite(20).unwrap();
        let noise = n1(0.0, 0.3);
        let g = n1(0.4, 0.3);
        let h = n1(-0.2, 0.3);
        let kl = kl_gaussian(&g, &h).unwrap();
        let half = 0.5 * weighted_norm_sq(&[0.6], &noise).unwrap();
        assert_relative_eq!(kl, half, epsilon = 1e-12);
        assert_relative_eq!(rule.total_weight(), 1.0, epsilon = 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative_and_zero_on_equal(m1 in -3.0f64..3.0, m2 in -3.0f64..3.0,
                                                v1 in 0.1f64..5.0, v2 in 0.1f64..5.0, c in -0.9f64..0.9) {
                let cov = |v: f64| DMatrix::from_row_slice(2, 2, &[v, c * v, c * v, v]);
                let p = GaussianDist::new(vec![m1, m2], cov(v1)).unwrap();
                let q = GaussianDist::new(vec![m2, m1], cov(v2)).unwrap();
                prop_assert!(kl_gaussian(&p, &q).unwrap() >= 0.0);
                prop_assert!(kl_gaussian(&p, &p).unwrap() < 1e-10);
            }

            #[test]
            fn equal_cov_kl_is_half_weighted_norm(m1 in -3.0f64..3.0, m2 in -3.0f64..3.0, v in 0.05f64..5.0) {
                let p = n1(m1, v);
                let q = n1(m2, v);
                let kl = kl_gaussian(&p, &q).unwrap();
                let w = 0.5 * weighted_norm_sq(&[m2 - m1], &q).unwrap();
                prop_assert!((kl - w).abs() <= 1e-12 * w.max(1.0));
            }

            #[test]
            fn hellinger_below_half_kl(m1 in -2.0f64..2.0, m2 in -2.0f64..2.0,
                                       v1 in 0.2f64..3.0, v2 in 0.2f64..3.0) {
                let rule = trapezoid(8001, -25.0, 25.0).unwrap();
                let h = hellinger_sq_numeric_1d(
                    |x| log_normal_pdf_1d(x, m1, v1),
                    |x| log_normal_pdf_1d(x, m2, v2),
                    &rule,
                ).unwrap();
                let kl = kl_gaussian(&n1(m1, v1), &n1(m2, v2)).unwrap();
                prop_assert!(h <= 0.5 * kl + 1e-8, "h {} kl {}", h, kl);
            }

            #[test]
            fn expected_kl_scale_invariant(a in -3.0f64..3.0, an in -3.0f64..3.0, c in 0.1f64..10.0) {
                let prior = PriorSpec::standard_normal(1).quadrature(20).unwrap();
                let base = expected_likelihood_kl(
                    &ForwardModel::scalar_linear(a), &ForwardModel::scalar_linear(an),
                    &[0.0], &prior, &n1(0.0, 0.7)).unwrap();
                let scaled = expected_likelihood_kl(
                    &ForwardModel::scalar_linear(c * a), &ForwardModel::scalar_linear(c * an),
                    &[0.0], &prior, &n1(0.0, 0.7 * c * c)).unwrap();
                prop_assert!((base - scaled).abs() <= 1e-10 * base.max(1e-300) + 1e-300);
            }
        }
    }
}
