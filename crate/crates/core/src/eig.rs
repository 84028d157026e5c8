//! Expected information gain by nested deterministic quadrature.
//!
//! The data integral is taken on standard-normal nodes through
//! `y = G(x; d) + L ε` with `Γ = L Lᵀ`. All likelihoods are evaluated in
//! whitened coordinates `L⁻¹ y`, where `‖y − g‖²_Γ = ‖L⁻¹y − L⁻¹g‖²`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::divergence::GaussianDist;
use crate::error::{Error, Result};
use crate::models::ObservationMap;
use crate::numeric::{weighted_log_sum_exp, CompensatedSum};
use crate::quadrature::{QuadratureRule, WeightKind};

/// One utility evaluation with enough metadata to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub value: f64,
    pub design: Vec<f64>,
    pub prior_nodes: usize,
    pub noise_nodes: usize,
    pub evidence_nodes: usize,
    pub model_tag: String,
    pub surrogate_tag: Option<String>,
}

/// The three rules of the nested estimator. `evidence = None` reuses the
/// prior rule for the inner integral.
#[derive(Debug, Clone)]
pub struct EigRules {
    pub prior: QuadratureRule,
    pub noise: QuadratureRule,
    pub evidence: Option<QuadratureRule>,
}

impl EigRules {
    pub fn new(prior: QuadratureRule, noise: QuadratureRule) -> Self {
        Self {
            prior,
            noise,
            evidence: None,
        }
    }

    pub fn evidence_rule(&self) -> &QuadratureRule {
        self.evidence.as_ref().unwrap_or(&self.prior)
    }
}

fn log_normalizer(noise: &GaussianDist) -> f64 {
    0.5 * noise.logdet() + 0.5 * noise.dim() as f64 * (2.0 * PI).ln()
}

/// `log N(y; g, Γ)`.
pub fn log_likelihood(y: &[f64], g: &[f64], noise: &GaussianDist) -> Result<f64> {
    if y.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: g.len(),
            context: "log_likelihood",
        });
    }
    let r: Vec<f64> = y.iter().zip(g).map(|(a, b)| a - b).collect();
    let m = crate::divergence::weighted_norm_sq(&r, noise)?;
    Ok(-0.5 * m - log_normalizer(noise))
}

/// Model outputs at the nodes of a rule, whitened, with prior-normalized
/// weights.
#[derive(Debug, Clone)]
pub(crate) struct Whitened {
    p: usize,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl Whitened {
    pub(crate) fn new(
        map: &dyn ObservationMap,
        d: &[f64],
        rule: &QuadratureRule,
        noise: &GaussianDist,
    ) -> Result<Self> {
        let p = noise.dim();
        if map.data_dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: map.data_dim(),
                context: "model output vs noise",
            });
        }
        if rule.dim() != map.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: map.param_dim(),
                got: rule.dim(),
                context: "prior rule vs parameter",
            });
        }
        let mut values = Vec::with_capacity(rule.len() * p);
        for x in rule.nodes() {
            let mut g = map.observe(x, d)?;
            noise.whiten_in_place(&mut g);
            values.extend(g);
        }
        Ok(Self {
            p,
            values,
            weights: rule.probability_weights(),
        })
    }

    fn len(&self) -> usize {
        self.weights.len()
    }

    fn center(&self, k: usize) -> &[f64] {
        &self.values[k * self.p..(k + 1) * self.p]
    }

    /// `log Σ_k w_k exp(−½‖y − h_k‖²)`, without the Gaussian normalizer.
    fn log_evidence(&self, yw: &[f64], scratch: &mut Vec<f64>) -> Option<f64> {
        scratch.clear();
        for k in 0..self.len() {
            let c = self.center(k);
            let mut s = 0.0;
            for (a, b) in yw.iter().zip(c) {
                s += (a - b) * (a - b);
            }
            scratch.push(-0.5 * s);
        }
        weighted_log_sum_exp(&self.weights, scratch)
    }

    fn log_kernel(&self, yw: &[f64], k: usize) -> f64 {
        let c = self.center(k);
        -0.5 * yw.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }
}

fn check_noise_rule(rule: &QuadratureRule, p: usize) -> Result<()> {
    if rule.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: rule.dim(),
            context: "noise rule",
        });
    }
    if *rule.kind() != WeightKind::StandardGaussian {
        return Err(Error::InvalidRule("noise rule must approximate N(0, I)".into()));
    }
    Ok(())
}

/// `Σ_i w_i Σ_j v_j f(i, j, y_ij)` with `y_ij = c_i + ε_j` in whitened
/// coordinates.
fn data_expectation<F>(centers: &Whitened, noise_rule: &QuadratureRule, mut f: F) -> Result<f64>
where
    F: FnMut(usize, usize, &[f64], &mut Vec<f64>) -> Result<f64>,
{
    let p = centers.p;
    let mut yw = vec![0.0; p];
    let mut scratch = Vec::new();
    let mut acc = CompensatedSum::new();
    for i in 0..centers.len() {
        let wi = centers.weights[i];
        if wi == 0.0 {
            continue;
        }
        let c = centers.center(i);
        for (j, (eps, wj)) in noise_rule.nodes().zip(noise_rule.weights()).enumerate() {
            for k in 0..p {
                yw[k] = c[k] + eps[k];
            }
            let v = f(i, j, &yw, &mut scratch)?;
            acc.add(wi * wj * v);
        }
    }
    Ok(acc.value())
}

/// `log π(y; d)`: log-sum-exp of the likelihood over a prior rule.
pub fn log_evidence(
    y: &[f64],
    d: &[f64],
    map: &dyn ObservationMap,
    prior_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<f64> {
    if y.len() != noise.dim() {
        return Err(Error::DimensionMismatch {
            expected: noise.dim(),
            got: y.len(),
            context: "data vector",
        });
    }
    let h = Whitened::new(map, d, prior_rule, noise)?;
    let yw = noise.whiten(y)?;
    let le = h
        .log_evidence(&yw, &mut Vec::new())
        .ok_or_else(|| Error::NonPositiveEvidence { y: y.to_vec() })?;
    Ok(le - log_normalizer(noise))
}

/// The expected information gain `U(d)` of `map` at design `d`.
pub fn eig(
    map: &dyn ObservationMap,
    d: &[f64],
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<EigEstimate> {
    let value = eig_value(map, d, rules, noise)?;
    Ok(EigEstimate {
        value,
        design: d.to_vec(),
        prior_nodes: rules.prior.len(),
        noise_nodes: rules.noise.len(),
        evidence_nodes: rules.evidence_rule().len(),
        model_tag: map.tag(),
        surrogate_tag: None,
    })
}

/// Same as [`eig`] for a surrogate, recording both tags.
pub fn eig_surrogate(
    surrogate: &dyn ObservationMap,
    model_tag: &str,
    d: &[f64],
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<EigEstimate> {
    let mut e = eig(surrogate, d, rules, noise)?;
    e.surrogate_tag = Some(e.model_tag.clone());
    e.model_tag = model_tag.to_string();
    Ok(e)
}

pub(crate) fn eig_value(
    map: &dyn ObservationMap,
    d: &[f64],
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<f64> {
    check_noise_rule(&rules.noise, noise.dim())?;
    let outer = Whitened::new(map, d, &rules.prior, noise)?;
    let inner = match &rules.evidence {
        Some(r) => Whitened::new(map, d, r, noise)?,
        None => outer.clone(),
    };
    eig_whitened(&outer, &inner, &rules.noise, noise)
}

fn eig_whitened(
    outer: &Whitened,
    inner: &Whitened,
    noise_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<f64> {
    let c = log_normalizer(noise);
    let v = data_expectation(outer, noise_rule, |i, j, yw, scratch| {
        let eps = noise_rule.node(j);
        let ll = -0.5 * eps.iter().map(|e| e * e).sum::<f64>() - c;
        let le = inner
            .log_evidence(yw, scratch)
            .ok_or(Error::EvidenceUnderflow { outer: i, noise: j })?
            - c;
        Ok(ll - le)
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteIntegrand { index: 0 });
    }
    Ok(v)
}

/// Ingredients shared by the stability diagnostics at one design: the true
/// and surrogate outputs on the prior nodes, whitened.
#[derive(Debug, Clone)]
pub struct DesignSamples {
    truth: Whitened,
    approx: Whitened,
}

impl DesignSamples {
    pub fn new(
        model: &dyn ObservationMap,
        surrogate: &dyn ObservationMap,
        d: &[f64],
        prior: &QuadratureRule,
        noise: &GaussianDist,
    ) -> Result<Self> {
        Ok(Self {
            truth: Whitened::new(model, d, prior, noise)?,
            approx: Whitened::new(surrogate, d, prior, noise)?,
        })
    }

    /// `U` for the true model and `U_N` for the surrogate.
    pub fn utilities(&self, noise_rule: &QuadratureRule, noise: &GaussianDist) -> Result<(f64, f64)> {
        check_noise_rule(noise_rule, noise.dim())?;
        Ok((
            eig_whitened(&self.truth, &self.truth, noise_rule, noise)?,
            eig_whitened(&self.approx, &self.approx, noise_rule, noise)?,
        ))
    }

    /// `U_N` alone.
    pub fn surrogate_utility(&self, noise_rule: &QuadratureRule, noise: &GaussianDist) -> Result<f64> {
        check_noise_rule(noise_rule, noise.dim())?;
        eig_whitened(&self.approx, &self.approx, noise_rule, noise)
    }

    /// `U` alone.
    pub fn true_utility(&self, noise_rule: &QuadratureRule, noise: &GaussianDist) -> Result<f64> {
        check_noise_rule(noise_rule, noise.dim())?;
        eig_whitened(&self.truth, &self.truth, noise_rule, noise)
    }

    /// `E_{μ₀} KL(π(·|X) ‖ π_N(·|X)) = ½ E‖G − G_N‖²_Γ` on the prior nodes.
    pub fn expected_kl(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for i in 0..self.truth.len() {
            let s: f64 = self
                .truth
                .center(i)
                .iter()
                .zip(self.approx.center(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc.add(self.truth.weights[i] * s);
        }
        0.5 * acc.value()
    }

    /// `K = ∫∫ log²(π(y|x)/π(y)) [π(y|x) + π_N(y|x)] dμ₀ dy`.
    pub fn k_constant(&self, noise_rule: &QuadratureRule, noise: &GaussianDist) -> Result<f64> {
        check_noise_rule(noise_rule, noise.dim())?;
        let truth = &self.truth;
        let log_ratio = |i: usize, yw: &[f64], scratch: &mut Vec<f64>, j: usize| -> Result<f64> {
            let le = truth
                .log_evidence(yw, scratch)
                .ok_or(Error::EvidenceUnderflow { outer: i, noise: j })?;
            Ok(truth.log_kernel(yw, i) - le)
        };
        let under_truth = data_expectation(truth, noise_rule, |i, j, yw, s| {
            let r = log_ratio(i, yw, s, j)?;
            Ok(r * r)
        })?;
        let under_approx = data_expectation(&self.approx, noise_rule, |i, j, yw, s| {
            let r = log_ratio(i, yw, s, j)?;
            Ok(r * r)
        })?;
        Ok(under_truth + under_approx)
    }

    /// `KL(π_N(y) ‖ π(y))` between the two evidences, by quadrature around
    /// the surrogate data law.
    pub fn evidence_kl(&self, noise_rule: &QuadratureRule, noise: &GaussianDist) -> Result<f64> {
        check_noise_rule(noise_rule, noise.dim())?;
        let mut other = Vec::new();
        data_expectation(&self.approx, noise_rule, |i, j, yw, scratch| {
            let a = self
                .approx
                .log_evidence(yw, scratch)
                .ok_or(Error::EvidenceUnderflow { outer: i, noise: j })?;
            let t = self
                .truth
                .log_evidence(yw, &mut other)
                .ok_or(Error::EvidenceUnderflow { outer: i, noise: j })?;
            Ok(a - t)
        })
    }
}

/// `½ log det(I + Γ^{-1/2} G C₀ Gᵀ Γ^{-1/2})` for a linear-Gaussian model.
pub fn eig_linear_gaussian_closed(
    g: &DMatrix<f64>,
    prior_cov: &DMatrix<f64>,
    noise: &GaussianDist,
) -> Result<f64> {
    let p = noise.dim();
    if g.nrows() != p || prior_cov.nrows() != g.ncols() || prior_cov.ncols() != g.ncols() {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: g.nrows(),
            context: "linear Gaussian dimensions",
        });
    }
    let prior = GaussianDist::new(vec![0.0; g.ncols()], prior_cov.clone())?;
    let m = noise
        .factor()
        .solve_lower_triangular(g)
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
    let mf = &m * prior.factor();
    let s = DMatrix::identity(p, p) + &mf * mf.transpose();
    let chol = nalgebra::Cholesky::new(s).ok_or(Error::NotPositiveDefinite("I + M C Mᵀ"))?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum())
}

/// `|U_N − U| = ½ |log((a_N² + 1)/(a² + 1))|` for the scalar linear model
/// with a standard normal prior and unit noise.
pub fn eig_error_example1(a: f64, a_n: f64) -> f64 {
    0.5 * ((a_n * a_n + 1.0) / (a * a + 1.0)).ln().abs()
}
