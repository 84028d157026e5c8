//! Deterministic quadrature rules.
//!
//! Every integral in the crate goes through a [`QuadratureRule`]: prior
//! expectations, data-space expectations, evidences and polynomial-chaos
//! projections. Gaussian rules are probabilist-normalized (weights sum to one
//! and approximate `E[f(Z)]`, `Z ~ N(0, I)`), so no `(2π)^(p/2)` factors leak
//! into callers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{affine_least_squares, CompensatedSum};

/// Coordinates closer than this are treated as the same node when merging.
pub const MERGE_TOL: f64 = 1e-14;

/// The measure a rule approximates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Lebesgue measure on an axis-aligned box.
    LebesgueOnBox { lower: Vec<f64>, upper: Vec<f64> },
    /// Standard normal `N(0, I)` (weights sum to one).
    StandardGaussian,
    /// A probability measure that is neither of the above, e.g. a Gaussian
    /// prior after mapping standard nodes through its Cholesky factor.
    Probability,
    /// Tensor product of heterogeneous factors, in axis order.
    Product(Vec<WeightKind>),
}

impl WeightKind {
    /// Total mass of the measure: box volume, or one for probability measures.
    pub fn total_mass(&self) -> f64 {
        match self {
            WeightKind::LebesgueOnBox { lower, upper } => {
                lower.iter().zip(upper).map(|(a, b)| b - a).product()
            }
            WeightKind::StandardGaussian | WeightKind::Probability => 1.0,
            WeightKind::Product(parts) => parts.iter().map(WeightKind::total_mass).product(),
        }
    }

    fn product(a: &WeightKind, b: &WeightKind) -> WeightKind {
        use WeightKind::*;
        match (a, b) {
            (LebesgueOnBox { lower: la, upper: ua }, LebesgueOnBox { lower: lb, upper: ub }) => {
                LebesgueOnBox {
                    lower: la.iter().chain(lb).copied().collect(),
                    upper: ua.iter().chain(ub).copied().collect(),
                }
            }
            (StandardGaussian, StandardGaussian) => StandardGaussian,
            _ => {
                let mut parts = Vec::new();
                for k in [a, b] {
                    match k {
                        Product(p) => parts.extend(p.iter().cloned()),
                        other => parts.push(other.clone()),
                    }
                }
                Product(parts)
            }
        }
    }
}

/// Nodes and weights of a deterministic integration rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    dim: usize,
    /// Row-major, `len() * dim` entries.
    nodes: Vec<f64>,
    weights: Vec<f64>,
    kind: WeightKind,
}

impl QuadratureRule {
    pub fn new(dim: usize, nodes: Vec<f64>, weights: Vec<f64>, kind: WeightKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("rule dimension must be positive".into()));
        }
        if weights.is_empty() || nodes.len() != weights.len() * dim {
            return Err(Error::InvalidRule(format!(
                "{} node coordinates for {} weights in dimension {dim}",
                nodes.len(),
                weights.len()
            )));
        }
        if nodes.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidRule("non-finite node or weight".into()));
        }
        if let WeightKind::LebesgueOnBox { lower, upper } = &kind {
            if lower.len() != dim || upper.len() != dim {
                return Err(Error::InvalidRule("box dimension differs from rule dimension".into()));
            }
        }
        Ok(Self {
            dim,
            nodes,
            weights,
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.nodes.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn total_weight(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for w in &self.weights {
            acc.add(*w);
        }
        acc.value()
    }

    /// Weights rescaled so they approximate expectations under the
    /// normalized measure (divided by the box volume for Lebesgue rules).
    pub fn probability_weights(&self) -> Vec<f64> {
        let mass = self.kind.total_mass();
        self.weights.iter().map(|w| w / mass).collect()
    }

    /// Verifies the weight-sum and containment invariants of the rule.
    pub fn check_invariants(&self) -> Result<()> {
        let sum = self.total_weight();
        let mass = self.kind.total_mass();
        if (sum - mass).abs() > 1e-12 * mass.abs().max(1.0) {
            return Err(Error::InvalidRule(format!(
                "weights sum to {sum}, expected {mass}"
            )));
        }
        if let WeightKind::LebesgueOnBox { lower, upper } = &self.kind {
            for node in self.nodes() {
                for (k, v) in node.iter().enumerate() {
                    let slack = 1e-14 * (upper[k] - lower[k]).abs().max(1.0);
                    if *v < lower[k] - slack || *v > upper[k] + slack {
                        return Err(Error::InvalidRule(format!("node {node:?} outside box")));
                    }
                }
            }
        }
        Ok(())
    }

    /// `Σ_k w_k f(x_k)` with a fixed, compensated summation order.
    pub fn integrate<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut acc = CompensatedSum::new();
        for (k, (node, w)) in self.nodes().zip(&self.weights).enumerate() {
            let v = f(node);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { index: k });
            }
            acc.add(w * v);
        }
        Ok(acc.value())
    }
}

/// Free-function form of [`QuadratureRule::integrate`].
pub fn integrate<F>(rule: &QuadratureRule, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    rule.integrate(f)
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::DegenerateInterval { a, b });
    }
    Ok(())
}

fn box_kind(a: f64, b: f64) -> WeightKind {
    WeightKind::LebesgueOnBox {
        lower: vec![a],
        upper: vec![b],
    }
}

/// Composite trapezoid rule on `n_nodes` equidistant nodes including both ends.
pub fn trapezoid(n_nodes: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    if n_nodes < 2 {
        return Err(Error::InvalidNodeCount { got: n_nodes, min: 2 });
    }
    check_interval(a, b)?;
    let intervals = (n_nodes - 1) as f64;
    let h = (b - a) / intervals;
    let mut nodes: Vec<f64> = (0..n_nodes)
        .map(|i| a + (b - a) * (i as f64 / intervals))
        .collect();
    nodes[n_nodes - 1] = b;
    let mut weights = vec![h; n_nodes];
    weights[0] = 0.5 * h;
    weights[n_nodes - 1] = 0.5 * h;
    QuadratureRule::new(1, nodes, weights, box_kind(a, b))
}

/// Orthonormal probabilist Hermite values `p_0..p_{n}` at `x`.
fn hermite_orthonormal(n: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if n == 0 {
        return;
    }
    out.push(x);
    for k in 1..n {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
}

/// Eigenvalues of a symmetric tridiagonal Jacobi matrix, ascending.
fn jacobi_eigenvalues(off_diag: &[f64]) -> Vec<f64> {
    let n = off_diag.len() + 1;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (i, b) in off_diag.iter().enumerate() {
        m[(i, i + 1)] = *b;
        m[(i + 1, i)] = *b;
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Imposes `x_i = -x_{n-1-i}` on ascending nodes (and weight symmetry).
fn symmetrize(nodes: &mut [f64], weights: &mut [f64]) {
    let n = nodes.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
}

/// Gauss–Hermite rule for the standard normal weight, exact for polynomial
/// expectations up to degree `2 n - 1`.
///
/// Nodes start from the Golub–Welsch eigenvalues and are polished by Newton
/// iteration on the orthonormal recurrence. Weights use the Christoffel form
/// `1 / Σ_k p_k(x)^2`, which keeps tiny tail weights relatively accurate.
pub fn gauss_hermite(n_nodes: usize) -> Result<QuadratureRule> {
    if n_nodes < 1 {
        return Err(Error::InvalidNodeCount { got: n_nodes, min: 1 });
    }
    let n = n_nodes;
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let mut nodes = if n == 1 { vec![0.0] } else { jacobi_eigenvalues(&off) };
    let mut p = Vec::with_capacity(n + 1);
    for x in nodes.iter_mut() {
        for _ in 0..100 {
            hermite_orthonormal(n, *x, &mut p);
            // p_n' = sqrt(n) p_{n-1}
            let dx = p[n] / ((n as f64).sqrt() * p[n - 1]);
            *x -= dx;
            if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            hermite_orthonormal(n - 1, x, &mut p);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    symmetrize(&mut nodes, &mut weights);
    QuadratureRule::new(1, nodes, weights, WeightKind::StandardGaussian)
}

/// Legendre `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss–Legendre rule on `[a, b]`, exact for polynomials of degree `2 n - 1`.
pub fn gauss_legendre(n_nodes: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    if n_nodes < 1 {
        return Err(Error::InvalidNodeCount { got: n_nodes, min: 1 });
    }
    check_interval(a, b)?;
    let n = n_nodes;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // descending initial guesses; reversed below
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    nodes.reverse();
    weights.reverse();
    symmetrize(&mut nodes, &mut weights);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let nodes = nodes.iter().map(|x| mid + half * x).collect();
    let weights = weights.iter().map(|w| w * half).collect();
    QuadratureRule::new(1, nodes, weights, box_kind(a, b))
}

/// Number of nodes of the nested Clenshaw–Curtis rule at `level`.
pub fn clenshaw_curtis_size(level: usize) -> usize {
    if level == 0 {
        1
    } else {
        (1usize << level) + 1
    }
}

/// Nested Clenshaw–Curtis rule on `[a, b]`: the midpoint at level 0 and the
/// `2^level + 1` Chebyshev extrema otherwise. Nodes are ascending, and nodes
/// shared between levels are bitwise identical.
pub fn clenshaw_curtis(level: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    check_interval(a, b)?;
    if level >= 30 {
        return Err(Error::Config(format!("Clenshaw-Curtis level {level} is too large")));
    }
    if level == 0 {
        return QuadratureRule::new(1, vec![0.5 * (a + b)], vec![b - a], box_kind(a, b));
    }
    let big_n = 1usize << level;
    let nf = big_n as f64;
    let theta = |j: usize| PI * (j as f64 / nf);
    let mut nodes: Vec<f64> = (0..=big_n).map(|j| -theta(j).cos()).collect();
    let mut weights = vec![0.0; big_n + 1];
    let end = 1.0 / (nf * nf - 1.0);
    weights[0] = end;
    weights[big_n] = end;
    for (j, w) in weights.iter_mut().enumerate().take(big_n).skip(1) {
        let t = theta(j);
        let mut v = 1.0;
        for k in 1..big_n / 2 {
            let kf = k as f64;
            v -= 2.0 * (2.0 * kf * t).cos() / (4.0 * kf * kf - 1.0);
        }
        v -= (nf * t).cos() / (nf * nf - 1.0);
        *w = 2.0 * v / nf;
    }
    symmetrize(&mut nodes, &mut weights);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let nodes = nodes
        .iter()
        .enumerate()
        .map(|(j, x)| {
            if j == 0 {
                a
            } else if j == big_n {
                b
            } else {
                mid + half * x
            }
        })
        .collect();
    let weights = weights.iter().map(|w| w * half).collect();
    QuadratureRule::new(1, nodes, weights, box_kind(a, b))
}

/// Cartesian product of two rules.
pub fn tensor(a: &QuadratureRule, b: &QuadratureRule) -> QuadratureRule {
    let dim = a.dim + b.dim;
    let mut nodes = Vec::with_capacity(a.len() * b.len() * dim);
    let mut weights = Vec::with_capacity(a.len() * b.len());
    for (na, wa) in a.nodes().zip(&a.weights) {
        for (nb, wb) in b.nodes().zip(&b.weights) {
            nodes.extend_from_slice(na);
            nodes.extend_from_slice(nb);
            weights.push(wa * wb);
        }
    }
    QuadratureRule {
        dim,
        nodes,
        weights,
        kind: WeightKind::product(&a.kind, &b.kind),
    }
}

/// Tensor product of a list of rules, in order.
pub fn tensor_all(rules: &[QuadratureRule]) -> Result<QuadratureRule> {
    let (first, rest) = rules
        .split_first()
        .ok_or_else(|| Error::InvalidDimension("tensor of zero rules".into()))?;
    Ok(rest.iter().fold(first.clone(), |acc, r| tensor(&acc, r)))
}

/// How the number of 1D nodes grows with the level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// `m(l) = 2 l + 1`
    Linear,
    /// `m(0) = 1`, `m(l) = 2^l + 1`
    Doubling,
}

impl Growth {
    pub fn size(self, level: usize) -> usize {
        match self {
            Growth::Linear => 2 * level + 1,
            Growth::Doubling => clenshaw_curtis_size(level),
        }
    }
}

/// A generator of 1D rules indexed by level, used by [`smolyak`].
pub trait RuleFamily {
    fn rule(&self, level: usize) -> Result<QuadratureRule>;
}

/// Nested Clenshaw–Curtis rules on `[a, b]`.
#[derive(Debug, Clone, Copy)]
pub struct ClenshawCurtisFamily {
    pub a: f64,
    pub b: f64,
}

impl RuleFamily for ClenshawCurtisFamily {
    fn rule(&self, level: usize) -> Result<QuadratureRule> {
        clenshaw_curtis(level, self.a, self.b)
    }
}

/// Gauss–Hermite rules with linear growth `2 l + 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussHermiteFamily;

impl RuleFamily for GaussHermiteFamily {
    fn rule(&self, level: usize) -> Result<QuadratureRule> {
        gauss_hermite(Growth::Linear.size(level))
    }
}

/// Gauss–Legendre rules on `[a, b]` with a configurable growth rule.
#[derive(Debug, Clone, Copy)]
pub struct GaussLegendreFamily {
    pub a: f64,
    pub b: f64,
    pub growth: Growth,
}

impl RuleFamily for GaussLegendreFamily {
    fn rule(&self, level: usize) -> Result<QuadratureRule> {
        gauss_legendre(self.growth.size(level), self.a, self.b)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// All multi-indices of length `dim` with entries summing to exactly `total`,
/// in lexicographic order.
pub(crate) fn compositions(dim: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(dim: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dim == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            rec(dim - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, total, &mut Vec::with_capacity(dim), &mut out);
    out
}

/// Smolyak combination rule of the given level:
///
/// `A(L, dim) = Σ_{L-dim+1 ≤ |l| ≤ L} (-1)^(L-|l|) C(dim-1, L-|l|) ⊗_k U^{l_k}`
///
/// with 1D levels starting at zero. Coincident nodes are merged and their
/// weights summed; negative weights are kept as they are.
pub fn smolyak(dim: usize, level: usize, family: &dyn RuleFamily) -> Result<QuadratureRule> {
    if dim < 1 {
        return Err(Error::InvalidDimension("Smolyak dimension must be positive".into()));
    }
    let rules: Vec<QuadratureRule> = (0..=level).map(|l| family.rule(l)).collect::<Result<_>>()?;
    for r in &rules {
        if r.dim() != 1 {
            return Err(Error::InvalidDimension("Smolyak family must produce 1D rules".into()));
        }
    }
    let base_kind = (1..dim).fold(rules[0].kind.clone(), |k, _| {
        WeightKind::product(&k, &rules[0].kind)
    });

    let mut entries: Vec<(Vec<f64>, f64)> = Vec::new();
    let min_total = (level + 1).saturating_sub(dim);
    for total in min_total..=level {
        let q = level - total;
        let coef = if q % 2 == 0 { 1.0 } else { -1.0 } * binomial(dim - 1, q);
        if coef == 0.0 {
            continue;
        }
        for index in compositions(dim, total) {
            let parts: Vec<QuadratureRule> = index.iter().map(|&l| rules[l].clone()).collect();
            let t = tensor_all(&parts)?;
            for (node, w) in t.nodes().zip(t.weights()) {
                entries.push((node.to_vec(), coef * w));
            }
        }
    }
    entries.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut nodes: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut current: Option<(Vec<f64>, CompensatedSum)> = None;
    for (node, w) in entries {
        match &mut current {
            Some((rep, acc)) if rep.iter().zip(&node).all(|(a, b)| (a - b).abs() <= MERGE_TOL) => {
                acc.add(w);
            }
            _ => {
                if let Some((rep, acc)) = current.take() {
                    nodes.extend(rep);
                    weights.push(acc.value());
                }
                let mut acc = CompensatedSum::new();
                acc.add(w);
                current = Some((node, acc));
            }
        }
    }
    if let Some((rep, acc)) = current {
        nodes.extend(rep);
        weights.push(acc.value());
    }
    QuadratureRule::new(dim, nodes, weights, base_kind)
}

/// One row of the quadrature self-check table.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Moments `E[X^k]` of the standard normal.
pub fn normal_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        (1..k).step_by(2).map(|j| j as f64).product()
    }
}

/// Exactness and invariant checks run by `oed quad check` and the acceptance
/// suite. Moment errors are measured relative to `max(1, E[X^k])`.
pub fn self_check() -> Vec<CheckRow> {
    let mut rows = Vec::new();

    for n in 1..=20 {
        let row = match gauss_hermite(n) {
            Ok(rule) => {
                let mut worst: f64 = 0.0;
                for k in 0..2 * n {
                    let got = rule
                        .integrate(|x| x[0].powi(k as i32))
                        .unwrap_or(f64::INFINITY);
                    let exact = normal_moment(k);
                    worst = worst.max((got - exact).abs() / exact.max(1.0));
                }
                CheckRow {
                    name: format!("gauss_hermite n={n} degree<={}", 2 * n - 1),
                    passed: worst < 1e-10,
                    detail: format!("max scaled error {worst:.3e}"),
                }
            }
            Err(e) => CheckRow {
                name: format!("gauss_hermite n={n}"),
                passed: false,
                detail: e.to_string(),
            },
        };
        rows.push(row);
    }

    let smolyak_cases: Vec<(String, Result<QuadratureRule>)> = vec![
        (
            "smolyak cc dim=2 level=3 on [0,1]^2".into(),
            smolyak(2, 3, &ClenshawCurtisFamily { a: 0.0, b: 1.0 }),
        ),
        (
            "smolyak cc dim=3 level=4 on [0,1]^3".into(),
            smolyak(3, 4, &ClenshawCurtisFamily { a: 0.0, b: 1.0 }),
        ),
        ("smolyak gh dim=2 level=4".into(), smolyak(2, 4, &GaussHermiteFamily)),
        ("smolyak gh dim=5 level=2".into(), smolyak(5, 2, &GaussHermiteFamily)),
    ];
    for (name, rule) in smolyak_cases {
        let row = match rule.and_then(|r| r.check_invariants().map(|_| r)) {
            Ok(r) => CheckRow {
                name,
                passed: true,
                detail: format!("{} nodes, weight sum {:.15}", r.len(), r.total_weight()),
            },
            Err(e) => CheckRow {
                name,
                passed: false,
                detail: e.to_string(),
            },
        };
        rows.push(row);
    }

    let exact = 2.0 / PI;
    let counts = [11usize, 21, 41, 81, 161, 321];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in &counts {
        if let Ok(rule) = trapezoid(n, 0.0, 1.0) {
            let v = rule.integrate(|x| (PI * x[0]).sin()).unwrap_or(f64::NAN);
            xs.push(((n - 1) as f64).ln());
            ys.push((v - exact).abs().ln());
        }
    }
    let (slope, _, _) = affine_least_squares(&xs, &ys);
    rows.push(CheckRow {
        name: "trapezoid self-convergence on sin(pi x)".into(),
        passed: (slope + 2.0).abs() <= 0.05,
        detail: format!("slope {slope:.4}"),
    });
    rows
}
