//! Forward observation maps `G(x; d)` and prior specifications.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::divergence::GaussianDist;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::quadrature::{gauss_hermite, gauss_legendre, tensor_all, QuadratureRule, WeightKind};

/// Anything that maps a parameter and a design to a data vector: forward
/// models and their surrogates alike.
pub trait ObservationMap: Send + Sync {
    fn param_dim(&self) -> usize;
    fn design_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn observe(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>>;
    fn tag(&self) -> String;
}

type Evaluator = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// Which forward map a [`ForwardModel`] evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Analytic2Out,
    ScalarLinear { a: f64 },
    /// `G(x) = A x`, independent of the design.
    Linear { matrix: Vec<Vec<f64>> },
    HeatSensor(HeatConfig),
    Custom { name: String },
}

#[derive(Clone)]
pub struct ForwardModel {
    kind: ModelKind,
    param_dim: usize,
    design_dim: usize,
    data_dim: usize,
    heat: Option<Arc<HeatSolver>>,
    custom: Option<Arc<Evaluator>>,
}

impl fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardModel")
            .field("kind", &self.kind)
            .field("param_dim", &self.param_dim)
            .field("design_dim", &self.design_dim)
            .field("data_dim", &self.data_dim)
            .finish()
    }
}

impl ForwardModel {
    /// The two-output map `x³ d_i² + x exp(−|0.2 − d_i|)` on `x ∈ [0, 1]`.
    pub fn analytic() -> Self {
        Self {
            kind: ModelKind::Analytic2Out,
            param_dim: 1,
            design_dim: 2,
            data_dim: 2,
            heat: None,
            custom: None,
        }
    }

    /// `G(x; d) = a x`, ignoring `d`.
    pub fn scalar_linear(a: f64) -> Self {
        Self {
            kind: ModelKind::ScalarLinear { a },
            param_dim: 1,
            design_dim: 1,
            data_dim: 1,
            heat: None,
            custom: None,
        }
    }

    pub fn linear(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let rows = matrix.len();
        let cols = matrix.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidDimension("linear model needs a non-empty rectangular matrix".into()));
        }
        Ok(Self {
            kind: ModelKind::Linear { matrix },
            param_dim: cols,
            design_dim: 0,
            data_dim: rows,
            heat: None,
            custom: None,
        })
    }

    /// Point sensor of the heat equation with a Gaussian source at `x`.
    pub fn heat(cfg: HeatConfig) -> Result<Self> {
        let solver = HeatSolver::new(cfg.clone())?;
        Ok(Self {
            data_dim: cfg.obs_times.len(),
            kind: ModelKind::HeatSensor(cfg),
            param_dim: 2,
            design_dim: 2,
            heat: Some(Arc::new(solver)),
            custom: None,
        })
    }

    /// Wraps an arbitrary deterministic closure.
    pub fn custom<F>(name: &str, param_dim: usize, design_dim: usize, data_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            kind: ModelKind::Custom { name: name.to_string() },
            param_dim,
            design_dim,
            data_dim,
            heat: None,
            custom: Some(Arc::new(f)),
        }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn heat_solver(&self) -> Option<&Arc<HeatSolver>> {
        self.heat.as_ref()
    }

    /// Parameter box for models with a bounded parameter domain.
    pub fn param_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self.kind {
            ModelKind::Analytic2Out => Some((vec![0.0], vec![1.0])),
            ModelKind::HeatSensor(_) => Some((vec![0.0; 2], vec![1.0; 2])),
            _ => None,
        }
    }

    fn evaluate(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ModelKind::Analytic2Out => {
                if !(0.0..=1.0).contains(&x[0]) {
                    return Err(Error::OutOfDomain {
                        point: x.to_vec(),
                        context: "parameter interval [0, 1]".into(),
                    });
                }
                Ok(analytic_g(x[0], [d[0], d[1]]).to_vec())
            }
            ModelKind::ScalarLinear { a } => Ok(vec![a * x[0]]),
            ModelKind::Linear { matrix } => Ok(matrix
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()),
            ModelKind::HeatSensor(_) => {
                let solver = self.heat.as_ref().expect("heat model owns a solver");
                solver.observe(x, d)
            }
            ModelKind::Custom { .. } => {
                let f = self.custom.as_ref().expect("custom model owns a closure");
                let out = f(x, d);
                if out.len() != self.data_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.data_dim,
                        got: out.len(),
                        context: "custom model output",
                    });
                }
                Ok(out)
            }
        }
    }
}

impl ObservationMap for ForwardModel {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn design_dim(&self) -> usize {
        self.design_dim
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn observe(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim,
                got: x.len(),
                context: "parameter",
            });
        }
        let checks_design = matches!(
            self.kind,
            ModelKind::Analytic2Out | ModelKind::HeatSensor(_) | ModelKind::Custom { .. }
        );
        if checks_design && d.len() != self.design_dim {
            return Err(Error::DimensionMismatch {
                expected: self.design_dim,
                got: d.len(),
                context: "design",
            });
        }
        let out = self.evaluate(x, d)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteModel {
                x: x.to_vec(),
                d: d.to_vec(),
            });
        }
        Ok(out)
    }

    fn tag(&self) -> String {
        match &self.kind {
            ModelKind::Analytic2Out => "analytic_2out".into(),
            ModelKind::ScalarLinear { a } => format!("scalar_linear(a={a})"),
            ModelKind::Linear { matrix } => format!("linear({}x{})", matrix.len(), self.param_dim),
            ModelKind::HeatSensor(cfg) => format!(
                "heat_sensor(n={},dt={},bdf={})",
                cfg.spatial_n, cfg.dt, cfg.bdf_order
            ),
            ModelKind::Custom { name } => format!("custom({name})"),
        }
    }
}

/// The two-output analytic measurement map.
pub fn analytic_g(x: f64, d: [f64; 2]) -> [f64; 2] {
    let x3 = x * x * x;
    d.map(|di| x3 * di * di + x * (-(0.2 - di).abs()).exp())
}

/// Convenience constructor matching the scalar linear example.
pub fn scalar_linear(a: f64) -> ForwardModel {
    ForwardModel::scalar_linear(a)
}

/// `E_{μ₀} ‖G(X; d)‖⁴_Γ`, the moment bounded by the Γ-weighted L⁴ condition.
pub fn gamma_l4_moment(
    model: &dyn ObservationMap,
    d: &[f64],
    prior_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<f64> {
    let weights = prior_rule.probability_weights();
    let mut acc = CompensatedSum::new();
    for (x, w) in prior_rule.nodes().zip(&weights) {
        let mut g = model.observe(x, d)?;
        noise.whiten_in_place(&mut g);
        let n2: f64 = g.iter().map(|v| v * v).sum();
        acc.add(w * n2 * n2);
    }
    Ok(acc.value())
}

/// Prior law of the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl PriorSpec {
    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        PriorSpec::UniformBox { lower, upper }
    }

    pub fn standard_normal(p: usize) -> Self {
        PriorSpec::Gaussian {
            mean: vec![0.0; p],
            cov: (0..p)
                .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::UniformBox { lower, .. } => lower.len(),
            PriorSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::UniformBox { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::Config("uniform prior bounds must be non-empty and of equal length".into()));
                }
                for (a, b) in lower.iter().zip(upper) {
                    if !(a.is_finite() && b.is_finite() && a < b) {
                        return Err(Error::DegenerateInterval { a: *a, b: *b });
                    }
                }
                Ok(())
            }
            PriorSpec::Gaussian { mean, cov } => GaussianDist::from_rows(mean.clone(), cov).map(|_| ()),
        }
    }

    /// Tensor rule with `n_per_axis` nodes per axis: Gauss–Legendre on a box,
    /// Gauss–Hermite mapped through the covariance factor otherwise.
    pub fn quadrature(&self, n_per_axis: usize) -> Result<QuadratureRule> {
        self.validate()?;
        match self {
            PriorSpec::UniformBox { lower, upper } => {
                let rules = lower
                    .iter()
                    .zip(upper)
                    .map(|(a, b)| gauss_legendre(n_per_axis, *a, *b))
                    .collect::<Result<Vec<_>>>()?;
                tensor_all(&rules)
            }
            PriorSpec::Gaussian { .. } => {
                let standard = tensor_all(&vec![gauss_hermite(n_per_axis)?; self.dim()])?;
                self.map_standard_rule(&standard)
            }
        }
    }

    /// Pushes a standard-normal rule forward to this Gaussian prior.
    pub fn map_standard_rule(&self, standard: &QuadratureRule) -> Result<QuadratureRule> {
        let PriorSpec::Gaussian { mean, cov } = self else {
            return Err(Error::Config("only Gaussian priors map standard-normal rules".into()));
        };
        if standard.dim() != mean.len() || *standard.kind() != WeightKind::StandardGaussian {
            return Err(Error::InvalidRule("expected a standard-normal rule of the prior dimension".into()));
        }
        let g = GaussianDist::from_rows(mean.clone(), cov)?;
        let is_standard = mean.iter().all(|m| *m == 0.0)
            && g.cov() == &DMatrix::identity(mean.len(), mean.len());
        let mut nodes = Vec::with_capacity(standard.len() * mean.len());
        for e in standard.nodes() {
            nodes.extend(g.color(e)?);
        }
        let kind = if is_standard {
            WeightKind::StandardGaussian
        } else {
            WeightKind::Probability
        };
        QuadratureRule::new(mean.len(), nodes, standard.weights().to_vec(), kind)
    }
}

fn default_spatial_n() -> usize {
    41
}
fn default_dt() -> f64 {
    1.0 / 400.0
}
fn default_bdf_order() -> usize {
    4
}
fn default_s() -> f64 {
    2.0
}
fn default_h() -> f64 {
    0.05
}
fn default_tau() -> f64 {
    0.3
}
fn default_final_time() -> f64 {
    0.4
}
fn default_obs_times() -> Vec<f64> {
    vec![0.08, 0.16, 0.24, 0.32, 0.40]
}

/// Discretization and source parameters of the heat model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatConfig {
    #[serde(default = "default_spatial_n")]
    pub spatial_n: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_bdf_order")]
    pub bdf_order: usize,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_final_time")]
    pub final_time: f64,
    #[serde(default = "default_obs_times")]
    pub obs_times: Vec<f64>,
}

impl Default for HeatConfig {
    fn default() -> Self {
        Self {
            spatial_n: default_spatial_n(),
            dt: default_dt(),
            bdf_order: default_bdf_order(),
            s: default_s(),
            h: default_h(),
            tau: default_tau(),
            final_time: default_final_time(),
            obs_times: default_obs_times(),
        }
    }
}

impl HeatConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("heat config: {m}")));
        if self.spatial_n < 3 {
            return bad("spatial_n must be at least 3");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(1..=4).contains(&self.bdf_order) {
            return bad("bdf_order must be in 1..=4");
        }
        if !(self.h > 0.0) || !self.s.is_finite() {
            return bad("source width must be positive and strength finite");
        }
        if !(self.tau < self.final_time) || !(self.tau >= 0.0) {
            return bad("need 0 <= tau < final_time");
        }
        if self.obs_times.is_empty() {
            return bad("at least one observation time is required");
        }
        if self.obs_times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("observation times must be strictly increasing");
        }
        if self.obs_times[0] < 0.0 || *self.obs_times.last().unwrap() > self.final_time + 1e-12 {
            return bad("observation times must lie in [0, final_time]");
        }
        Ok(())
    }

    pub fn cache_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.spatial_n.hash(&mut h);
        self.bdf_order.hash(&mut h);
        for v in [self.dt, self.s, self.h, self.tau, self.final_time] {
            v.to_bits().hash(&mut h);
        }
        for t in &self.obs_times {
            t.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn n_steps(&self) -> usize {
        (self.final_time / self.dt - 1e-9).ceil() as usize
    }
}

/// BDF coefficients `a_0..a_q` with `Σ a_j u^{k-j} = dt f^k`.
pub fn bdf_coefficients(order: usize) -> &'static [f64] {
    match order {
        1 => &[1.0, -1.0],
        2 => &[1.5, -2.0, 0.5],
        3 => &[11.0 / 6.0, -3.0, 1.5, -1.0 / 3.0],
        _ => &[25.0 / 12.0, -4.0, 3.0, -4.0 / 3.0, 0.25],
    }
}

/// Symmetric positive-definite band matrix, factored in place.
#[derive(Debug, Clone)]
struct BandCholesky {
    n: usize,
    bw: usize,
    /// Row `r` holds columns `r - bw ..= r` of the factor.
    band: Vec<f64>,
}

impl BandCholesky {
    fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let stride = bw + 1;
        let mut band = vec![0.0; n * stride];
        for r in 0..n {
            let lo = r.saturating_sub(bw);
            for c in lo..=r {
                let mut s = entry(r, c);
                let klo = lo.max(c.saturating_sub(bw));
                for k in klo..c {
                    s -= band[r * stride + k + bw - r] * band[c * stride + k + bw - c];
                }
                if c == r {
                    if !(s > 0.0) {
                        return Err(Error::LinearSolve(format!("pivot {s} at row {r}")));
                    }
                    band[r * stride + bw] = s.sqrt();
                } else {
                    band[r * stride + c + bw - r] = s / band[c * stride + bw];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, stride) = (self.n, self.bw, self.bw + 1);
        for r in 0..n {
            let lo = r.saturating_sub(bw);
            let mut s = b[r];
            for k in lo..r {
                s -= self.band[r * stride + k + bw - r] * b[k];
            }
            b[r] = s / self.band[r * stride + bw];
        }
        for r in (0..n).rev() {
            let hi = (r + bw).min(n - 1);
            let mut s = b[r];
            for k in r + 1..=hi {
                s -= self.band[k * stride + r + bw - k] * b[k];
            }
            b[r] = s / self.band[r * stride + bw];
        }
    }
}

/// Space-time heat solution sampled at the observation times.
#[derive(Debug, Clone)]
pub struct HeatField {
    n: usize,
    obs_times: Vec<f64>,
    snapshots: Vec<Vec<f64>>,
    /// `(t_k, ∫ v(·, t_k))` for every step, trapezoid in space.
    total_heat: Vec<(f64, f64)>,
}

impl HeatField {
    pub fn obs_times(&self) -> &[f64] {
        &self.obs_times
    }

    pub fn total_heat(&self) -> &[(f64, f64)] {
        &self.total_heat
    }

    pub fn snapshot(&self, i: usize) -> &[f64] {
        &self.snapshots[i]
    }

    /// Bilinear interpolation of the `i`-th snapshot at `z ∈ [0, 1]²`.
    pub fn value_at(&self, z: &[f64], i: usize) -> Result<f64> {
        if z.len() != 2 || z.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfDomain {
                point: z.to_vec(),
                context: "unit square".into(),
            });
        }
        let m = (self.n - 1) as f64;
        let locate = |v: f64| {
            let s = v * m;
            let k = (s.floor() as usize).min(self.n - 2);
            (k, s - k as f64)
        };
        let (i0, fx) = locate(z[0]);
        let (j0, fy) = locate(z[1]);
        let u = &self.snapshots[i];
        let at = |a: usize, b: usize| u[a * self.n + b];
        Ok((1.0 - fx) * ((1.0 - fy) * at(i0, j0) + fy * at(i0, j0 + 1))
            + fx * ((1.0 - fy) * at(i0 + 1, j0) + fy * at(i0 + 1, j0 + 1)))
    }

    pub fn observe(&self, d: &[f64]) -> Result<Vec<f64>> {
        (0..self.obs_times.len()).map(|i| self.value_at(d, i)).collect()
    }
}

/// Finite-difference heat solver on the unit square with zero-flux walls.
///
/// The ghost-node Neumann Laplacian `L` is symmetrized by the trapezoid
/// weights `W`, so each BDF step solves the SPD band system
/// `W (a_0 I − dt L) u = W (rhs)`.
#[derive(Debug)]
pub struct HeatSolver {
    cfg: HeatConfig,
    cfg_hash: u64,
    weights: Vec<f64>,
    factors: Vec<BandCholesky>,
    cache: RwLock<HashMap<(u64, u64, u64), Arc<HeatField>>>,
}

impl HeatSolver {
    pub fn new(cfg: HeatConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.spatial_n;
        let hs = 1.0 / (n - 1) as f64;
        let w1 = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let weights: Vec<f64> = (0..n * n).map(|r| w1(r / n) * w1(r % n)).collect();
        let inv_h2 = 1.0 / (hs * hs);
        // coefficient of u_{nb} in row `i` of the 1D ghost-node Laplacian
        let lap1 = move |i: usize, nb: usize| -> f64 {
            if (i == 0 && nb == 1) || (i == n - 1 && nb == n - 2) {
                2.0 * inv_h2
            } else {
                inv_h2
            }
        };
        let factors = (1..=cfg.bdf_order)
            .map(|q| {
                let a0 = bdf_coefficients(q)[0];
                let dt = cfg.dt;
                let w = &weights;
                BandCholesky::factor(n * n, n, |r, c| {
                    let (ri, rj) = (r / n, r % n);
                    let (ci, cj) = (c / n, c % n);
                    let lap = if r == c {
                        -4.0 * inv_h2
                    } else if ri == ci && rj.abs_diff(cj) == 1 {
                        lap1(rj, cj)
                    } else if rj == cj && ri.abs_diff(ci) == 1 {
                        lap1(ri, ci)
                    } else {
                        0.0
                    };
                    let ident = if r == c { a0 } else { 0.0 };
                    w[r] * (ident - dt * lap)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg_hash: cfg.cache_hash(),
            cfg,
            weights,
            factors,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &HeatConfig {
        &self.cfg
    }

    fn spacing(&self) -> f64 {
        1.0 / (self.cfg.spatial_n - 1) as f64
    }

    /// Source density `S(z)` on the grid for a source at `x` (before cutoff).
    pub fn source_grid(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cfg.spatial_n;
        let hs = self.spacing();
        let (s, h) = (self.cfg.s, self.cfg.h);
        let amp = s / (2.0 * std::f64::consts::PI * h * h);
        (0..n * n)
            .map(|r| {
                let zx = (r / n) as f64 * hs - x[0];
                let zy = (r % n) as f64 * hs - x[1];
                amp * (-(zx * zx + zy * zy) / (2.0 * h * h)).exp()
            })
            .collect()
    }

    /// Trapezoid integral over the square of a grid function.
    pub fn integrate_grid(&self, u: &[f64]) -> f64 {
        let hs = self.spacing();
        let mut acc = CompensatedSum::new();
        for (w, v) in self.weights.iter().zip(u) {
            acc.add(w * v);
        }
        hs * hs * acc.value()
    }

    /// Solution for a source at `x`, from the cache when available.
    pub fn solve(&self, x: &[f64]) -> Result<Arc<HeatField>> {
        if x.len() != 2 || x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfDomain {
                point: x.to_vec(),
                context: "source domain [0, 1]^2".into(),
            });
        }
        let key = (x[0].to_bits(), x[1].to_bits(), self.cfg_hash);
        if let Some(f) = self.cache.read().expect("heat cache poisoned").get(&key) {
            return Ok(Arc::clone(f));
        }
        let field = Arc::new(self.solve_uncached(x)?);
        self.cache
            .write()
            .expect("heat cache poisoned")
            .insert(key, Arc::clone(&field));
        Ok(field)
    }

    pub fn cached_solutions(&self) -> usize {
        self.cache.read().expect("heat cache poisoned").len()
    }

    pub fn observe(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != 2 || d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfDomain {
                point: d.to_vec(),
                context: "sensor domain [0, 1]^2".into(),
            });
        }
        self.solve(x)?.observe(d)
    }

    fn solve_uncached(&self, x: &[f64]) -> Result<HeatField> {
        let cfg = &self.cfg;
        let n = cfg.spatial_n;
        let len = n * n;
        let dt = cfg.dt;
        let steps = cfg.n_steps();
        let source = self.source_grid(x);
        // For multistep orders the half-step shift makes the settled total
        // heat equal s·τ·(source mass) in the discrete scheme.
        let shift = if cfg.bdf_order >= 2 { 0.5 } else { 0.0 };

        let mut history: Vec<Vec<f64>> = vec![vec![0.0; len]];
        let mut total_heat = vec![(0.0, 0.0)];
        let mut snapshots: Vec<Vec<f64>> = Vec::with_capacity(cfg.obs_times.len());
        let mut next_obs = 0;
        while next_obs < cfg.obs_times.len() && cfg.obs_times[next_obs] <= 0.0 {
            snapshots.push(vec![0.0; len]);
            next_obs += 1;
        }
        let mut rhs = vec![0.0; len];
        for k in 1..=steps {
            let t_prev = (k - 1) as f64 * dt;
            let t = k as f64 * dt;
            let q = k.min(cfg.bdf_order);
            let a = bdf_coefficients(q);
            let factor = ((cfg.tau - t_prev) / dt - shift).clamp(0.0, 1.0);
            for r in 0..len {
                let mut v = dt * factor * source[r];
                for (j, aj) in a.iter().enumerate().skip(1) {
                    v -= aj * history[history.len() - j][r];
                }
                rhs[r] = self.weights[r] * v;
            }
            self.factors[q - 1].solve_in_place(&mut rhs);
            if rhs.iter().any(|v| !v.is_finite()) {
                return Err(Error::LinearSolve(format!("non-finite heat state at step {k}")));
            }
            let current = rhs.clone();
            total_heat.push((t, self.integrate_grid(&current)));
            let prev = &history[history.len() - 1];
            while next_obs < cfg.obs_times.len() && cfg.obs_times[next_obs] <= t + 1e-12 * dt {
                let to = cfg.obs_times[next_obs];
                let theta = ((to - t_prev) / dt).clamp(0.0, 1.0);
                snapshots.push(
                    prev.iter()
                        .zip(&current)
                        .map(|(a, b)| (1.0 - theta) * a + theta * b)
                        .collect(),
                );
                next_obs += 1;
            }
            history.push(current);
            if history.len() > cfg.bdf_order {
                history.remove(0);
            }
        }
        if snapshots.len() != cfg.obs_times.len() {
            return Err(Error::Config("observation time beyond the integration window".into()));
        }
        Ok(HeatField {
            n,
            obs_times: cfg.obs_times.clone(),
            snapshots,
            total_heat,
        })
    }
}

/// Solves the heat problem for a source at `x`.
pub fn heat_solve(x: &[f64], cfg: &HeatConfig) -> Result<Arc<HeatField>> {
    HeatSolver::new(cfg.clone())?.solve(x)
}

/// Samples the heat solution for source `x` at sensor `d`.
pub fn heat_observe(x: &[f64], d: &[f64], cfg: &HeatConfig) -> Result<Vec<f64>> {
    HeatSolver::new(cfg.clone())?.observe(x, d)
}
