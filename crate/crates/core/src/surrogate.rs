//! Surrogate observation maps `G_N`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ForwardModel, ObservationMap};
use crate::numeric::CompensatedSum;
use crate::quadrature::QuadratureRule;

/// Summary of a surrogate's representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateKind {
    PiecewiseLinearX { n_intervals: usize },
    SparseMultilinear { level: usize, n_nodes: usize },
    Pce { degree: usize, truncation: Truncation, n_terms: usize },
}

/// Multi-index set of a polynomial-chaos expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// `|j|_1 ≤ N`
    #[default]
    TotalDegree,
    /// `max_k j_k ≤ N`
    Tensor,
}

#[derive(Debug)]
enum Repr {
    PlX(PiecewiseLinearX),
    Sparse(SparseGrid),
    Pce(PceExpansion),
}

/// An approximation `G_N` of a forward model at fidelity `N`.
#[derive(Debug)]
pub struct Surrogate {
    kind: SurrogateKind,
    level_param: usize,
    source_tag: String,
    param_dim: usize,
    design_dim: usize,
    data_dim: usize,
    repr: Repr,
}

impl Surrogate {
    pub fn kind(&self) -> &SurrogateKind {
        &self.kind
    }

    /// The fidelity reported against error curves: knot intervals, sparse
    /// grid nodes, or polynomial degree.
    pub fn level_param(&self) -> usize {
        self.level_param
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Grid nodes in the joint `(x, d)` box for interpolating surrogates that
    /// own a fixed grid.
    pub fn sparse_nodes(&self) -> Option<Vec<Vec<f64>>> {
        match &self.repr {
            Repr::Sparse(g) => Some(g.nodes()),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = match &self.repr {
            Repr::PlX(_) => {
                return Err(Error::NotSerializable(
                    "piecewise-linear surrogates evaluate the model on demand".into(),
                ))
            }
            Repr::Sparse(g) => Payload::Sparse(g.clone()),
            Repr::Pce(p) => Payload::Pce(p.clone()),
        };
        let artifact = Artifact {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            kind: self.kind.clone(),
            level_param: self.level_param,
            source_tag: self.source_tag.clone(),
            param_dim: self.param_dim,
            design_dim: self.design_dim,
            data_dim: self.data_dim,
            payload,
        };
        let text = serde_json::to_string(&artifact)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let a: Artifact = serde_json::from_str(&text)?;
        if a.format != ARTIFACT_FORMAT || a.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported surrogate artifact {} v{}",
                a.format, a.version
            )));
        }
        let repr = match a.payload {
            Payload::Sparse(g) => Repr::Sparse(g),
            Payload::Pce(p) => Repr::Pce(p),
        };
        Ok(Self {
            kind: a.kind,
            level_param: a.level_param,
            source_tag: a.source_tag,
            param_dim: a.param_dim,
            design_dim: a.design_dim,
            data_dim: a.data_dim,
            repr,
        })
    }
}

const ARTIFACT_FORMAT: &str = "oed-surrogate";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Artifact {
    format: String,
    version: u32,
    kind: SurrogateKind,
    level_param: usize,
    source_tag: String,
    param_dim: usize,
    design_dim: usize,
    data_dim: usize,
    payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Payload {
    Sparse(SparseGrid),
    Pce(PceExpansion),
}

impl ObservationMap for Surrogate {
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
        eval_surrogate(self, x, d)
    }

    fn tag(&self) -> String {
        match &self.kind {
            SurrogateKind::PiecewiseLinearX { n_intervals } => format!("pl_x(N={n_intervals})"),
            SurrogateKind::SparseMultilinear { level, n_nodes } => {
                format!("sparse_multilinear(level={level},N={n_nodes})")
            }
            SurrogateKind::Pce { degree, truncation, .. } => {
                format!("pce(N={degree},{truncation:?})")
            }
        }
    }
}

/// Evaluates a surrogate; points outside its domain are rejected.
pub fn eval_surrogate(s: &Surrogate, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    if x.len() != s.param_dim {
        return Err(Error::DimensionMismatch {
            expected: s.param_dim,
            got: x.len(),
            context: "surrogate parameter",
        });
    }
    match &s.repr {
        Repr::PlX(p) => p.eval(x[0], d),
        Repr::Sparse(g) => {
            let z = joint(x, d, s.design_dim)?;
            g.eval(&z)
        }
        Repr::Pce(p) => {
            let z = joint(x, d, s.design_dim)?;
            p.eval(&z)
        }
    }
}

fn joint(x: &[f64], d: &[f64], design_dim: usize) -> Result<Vec<f64>> {
    if d.len() != design_dim {
        return Err(Error::DimensionMismatch {
            expected: design_dim,
            got: d.len(),
            context: "surrogate design",
        });
    }
    Ok(x.iter().chain(d).copied().collect())
}

fn to_unit(z: &[f64], lower: &[f64], upper: &[f64], context: &str) -> Result<Vec<f64>> {
    let mut u = Vec::with_capacity(z.len());
    for k in 0..z.len() {
        let width = upper[k] - lower[k];
        let v = (z[k] - lower[k]) / width;
        let slack = 1e-12;
        if !(v >= -slack && v <= 1.0 + slack) {
            return Err(Error::OutOfDomain {
                point: z.to_vec(),
                context: context.to_string(),
            });
        }
        u.push(v.clamp(0.0, 1.0));
    }
    Ok(u)
}

fn check_box(lower: &[f64], upper: &[f64], dim: usize) -> Result<()> {
    if lower.len() != dim || upper.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: lower.len(),
            context: "surrogate box",
        });
    }
    for (a, b) in lower.iter().zip(upper) {
        if !(a < b) {
            return Err(Error::DegenerateInterval { a: *a, b: *b });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// piecewise linear in x

#[derive(Debug)]
struct PiecewiseLinearX {
    model: ForwardModel,
    n: usize,
    memo: RwLock<HashMap<Vec<u64>, Arc<Vec<Vec<f64>>>>>,
}

impl PiecewiseLinearX {
    fn knots(&self, d: &[f64]) -> Result<Arc<Vec<Vec<f64>>>> {
        let key: Vec<u64> = d.iter().map(|v| v.to_bits()).collect();
        if let Some(k) = self.memo.read().expect("memo poisoned").get(&key) {
            return Ok(Arc::clone(k));
        }
        let values = (0..=self.n)
            .map(|k| self.model.observe(&[k as f64 / self.n as f64], d))
            .collect::<Result<Vec<_>>>()?;
        let values = Arc::new(values);
        self.memo
            .write()
            .expect("memo poisoned")
            .insert(key, Arc::clone(&values));
        Ok(values)
    }

    fn eval(&self, x: f64, d: &[f64]) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutOfDomain {
                point: vec![x],
                context: "parameter interval [0, 1]".into(),
            });
        }
        let knots = self.knots(d)?;
        let s = x * self.n as f64;
        let k = (s.floor() as usize).min(self.n - 1);
        let t = s - k as f64;
        Ok(knots[k]
            .iter()
            .zip(&knots[k + 1])
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect())
    }
}

/// Piecewise-linear interpolation in `x` on `n_intervals + 1` equidistant
/// knots of `[0, 1]`; knot values are computed per design and memoized.
pub fn build_pl_x(model: &ForwardModel, n_intervals: usize) -> Result<Surrogate> {
    if n_intervals < 1 {
        return Err(Error::InvalidNodeCount { got: n_intervals, min: 1 });
    }
    if model.param_dim() != 1 {
        return Err(Error::InvalidDimension("piecewise-linear surrogate needs a scalar parameter".into()));
    }
    if let Some((lo, hi)) = model.param_box() {
        if lo != [0.0] || hi != [1.0] {
            return Err(Error::Config("piecewise-linear surrogate needs parameter domain [0, 1]".into()));
        }
    }
    Ok(Surrogate {
        kind: SurrogateKind::PiecewiseLinearX { n_intervals },
        level_param: n_intervals,
        source_tag: model.tag(),
        param_dim: 1,
        design_dim: model.design_dim(),
        data_dim: model.data_dim(),
        repr: Repr::PlX(PiecewiseLinearX {
            model: model.clone(),
            n: n_intervals,
            memo: RwLock::new(HashMap::new()),
        }),
    })
}

// ---------------------------------------------------------------------------
// sparse multilinear interpolation

/// Nodes of the 1D hierarchical level on `[0, 1]`: the midpoint, then both
/// ends, then the odd multiples of `2^-level`.
pub fn hierarchical_nodes(level: usize) -> Vec<f64> {
    match level {
        0 => vec![0.5],
        1 => vec![0.0, 1.0],
        l => {
            let m = 1usize << (l - 1);
            let scale = (1u64 << l) as f64;
            (1..=m).map(|k| (2 * k - 1) as f64 / scale).collect()
        }
    }
}

/// The single basis function of `level` that can be nonzero at `u`, as
/// `(local index, value)`.
fn hierarchical_basis(level: usize, u: f64) -> (usize, f64) {
    match level {
        0 => (0, 1.0),
        1 => {
            if u < 0.5 {
                (0, 1.0 - 2.0 * u)
            } else {
                (1, 2.0 * u - 1.0)
            }
        }
        l => {
            let m = 1usize << (l - 1);
            let k = ((u * m as f64).floor() as usize).min(m - 1);
            let p = (2 * k + 1) as f64 / (1u64 << l) as f64;
            (k, (1.0 - (1u64 << l) as f64 * (u - p).abs()).max(0.0))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Subspace {
    levels: Vec<usize>,
    counts: Vec<usize>,
    /// `Π counts × data_dim` surpluses, row-major over axes.
    surpluses: Vec<f64>,
}

impl Subspace {
    fn add_value(&self, u: &[f64], out: &mut [f64]) {
        let p = out.len();
        let mut flat = 0;
        let mut weight = 1.0;
        for (k, (&l, &c)) in self.levels.iter().zip(&self.counts).enumerate() {
            let (idx, v) = hierarchical_basis(l, u[k]);
            if v == 0.0 {
                return;
            }
            weight *= v;
            flat = flat * c + idx;
        }
        for (o, s) in out.iter_mut().zip(&self.surpluses[flat * p..(flat + 1) * p]) {
            *o += weight * s;
        }
    }
}

/// Hierarchical-surplus sparse interpolant on a box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    level: usize,
    data_dim: usize,
    n_nodes: usize,
    subspaces: Vec<Subspace>,
}

impl SparseGrid {
    fn eval_unit(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.data_dim];
        for s in &self.subspaces {
            s.add_value(u, &mut out);
        }
        out
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let u = to_unit(z, &self.lower, &self.upper, "sparse grid box")?;
        Ok(self.eval_unit(&u))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// All grid nodes in box coordinates.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_nodes);
        for s in &self.subspaces {
            for local in subspace_points(&s.levels) {
                out.push(self.from_unit(&local));
            }
        }
        out
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, v)| self.lower[k] + v * (self.upper[k] - self.lower[k]))
            .collect()
    }
}

fn subspace_points(levels: &[usize]) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = levels.iter().map(|&l| hierarchical_nodes(l)).collect();
    let mut pts = vec![Vec::with_capacity(levels.len())];
    for axis in &axes {
        let mut next = Vec::with_capacity(pts.len() * axis.len());
        for p in &pts {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Sparse piecewise-multilinear interpolant of `model` over the joint box
/// `X × D` with all hierarchical levels `|l| ≤ level`.
pub fn build_sparse_multilinear(
    model: &ForwardModel,
    level: usize,
    lower: &[f64],
    upper: &[f64],
) -> Result<Surrogate> {
    let pd = model.param_dim();
    let dim = pd + model.design_dim();
    check_box(lower, upper, dim)?;
    let p = model.data_dim();
    let mut grid = SparseGrid {
        lower: lower.to_vec(),
        upper: upper.to_vec(),
        level,
        data_dim: p,
        n_nodes: 0,
        subspaces: Vec::new(),
    };
    for total in 0..=level {
        let mut added = Vec::new();
        for levels in crate::quadrature::compositions(dim, total) {
            let counts: Vec<usize> = levels.iter().map(|&l| hierarchical_nodes(l).len()).collect();
            let mut surpluses = Vec::with_capacity(counts.iter().product::<usize>() * p);
            for u in subspace_points(&levels) {
                let z = grid.from_unit(&u);
                let value = model.observe(&z[..pd], &z[pd..])?;
                let current = grid.eval_unit(&u);
                surpluses.extend(value.iter().zip(&current).map(|(a, b)| a - b));
            }
            added.push(Subspace {
                levels,
                counts,
                surpluses,
            });
        }
        for s in added {
            grid.n_nodes += s.surpluses.len() / p;
            grid.subspaces.push(s);
        }
    }
    Ok(Surrogate {
        kind: SurrogateKind::SparseMultilinear {
            level,
            n_nodes: grid.n_nodes,
        },
        level_param: grid.n_nodes,
        source_tag: model.tag(),
        param_dim: pd,
        design_dim: model.design_dim(),
        data_dim: p,
        repr: Repr::Sparse(grid),
    })
}

/// Number of nodes of the hierarchical sparse grid without building it.
pub fn sparse_grid_size(dim: usize, level: usize) -> usize {
    (0..=level)
        .flat_map(|t| crate::quadrature::compositions(dim, t))
        .map(|l| l.iter().map(|&v| hierarchical_nodes(v).len()).product::<usize>())
        .sum()
}

// ---------------------------------------------------------------------------
// polynomial chaos

/// Legendre `P_0..P_n` at `t ∈ [-1, 1]`.
pub fn legendre_values(n: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(t);
    }
    for k in 1..n {
        let kf = k as f64;
        p.push(((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0));
    }
    p
}

/// Shifted Legendre polynomials on `[0, 1]`, orthonormal under the uniform
/// probability measure: `ψ_n(u) = √(2n+1) P_n(2u − 1)`.
pub fn orthonormal_legendre(n: usize, u: f64) -> Vec<f64> {
    legendre_values(n, 2.0 * u - 1.0)
        .into_iter()
        .enumerate()
        .map(|(k, v)| v * ((2 * k + 1) as f64).sqrt())
        .collect()
}

/// Multi-indices of length `dim` in graded order.
pub fn multi_indices(dim: usize, degree: usize, truncation: Truncation) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let max_total = match truncation {
        Truncation::TotalDegree => degree,
        Truncation::Tensor => degree * dim,
    };
    for total in 0..=max_total {
        for mut j in crate::quadrature::compositions(dim, total) {
            if truncation == Truncation::Tensor && j.iter().any(|&v| v > degree) {
                continue;
            }
            j.reverse();
            out.push(j);
        }
    }
    out
}

/// Tensorized Legendre expansion on a box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PceExpansion {
    lower: Vec<f64>,
    upper: Vec<f64>,
    degree: usize,
    truncation: Truncation,
    data_dim: usize,
    indices: Vec<Vec<usize>>,
    /// One data vector per multi-index.
    coefficients: Vec<Vec<f64>>,
}

impl PceExpansion {
    fn basis_table(&self, u: &[f64]) -> Vec<Vec<f64>> {
        u.iter().map(|v| orthonormal_legendre(self.degree, *v)).collect()
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let u = to_unit(z, &self.lower, &self.upper, "polynomial chaos box")?;
        let table = self.basis_table(&u);
        let mut acc = vec![CompensatedSum::new(); self.data_dim];
        for (j, c) in self.indices.iter().zip(&self.coefficients) {
            let psi: f64 = j.iter().enumerate().map(|(k, &jk)| table[k][jk]).product();
            for (a, ck) in acc.iter_mut().zip(c) {
                a.add(ck * psi);
            }
        }
        Ok(acc.iter().map(CompensatedSum::value).collect())
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }
}

/// Model values at every node of a joint `(x, d)` rule.
fn sample_model(model: &dyn ObservationMap, rule: &QuadratureRule) -> Result<Vec<Vec<f64>>> {
    let pd = model.param_dim();
    rule.nodes().map(|z| model.observe(&z[..pd], &z[pd..])).collect()
}

/// Ratio-of-integrals projection `∫ G Ψ_j / ∫ Ψ_j²` for any basis given as a
/// function of the unit-box point and the multi-index.
pub fn project_coefficients<B>(
    values: &[Vec<f64>],
    rule: &QuadratureRule,
    unit_points: &[Vec<f64>],
    indices: &[Vec<usize>],
    basis: B,
) -> Vec<Vec<f64>>
where
    B: Fn(&[f64], &[usize]) -> f64,
{
    let p = values.first().map_or(0, Vec::len);
    indices
        .iter()
        .map(|j| {
            let mut num = vec![CompensatedSum::new(); p];
            let mut den = CompensatedSum::new();
            for ((u, w), g) in unit_points.iter().zip(rule.weights()).zip(values) {
                let psi = basis(u, j);
                for (n, gk) in num.iter_mut().zip(g) {
                    n.add(w * gk * psi);
                }
                den.add(w * psi * psi);
            }
            num.iter().map(|n| n.value() / den.value()).collect()
        })
        .collect()
}

/// Legendre chaos surrogate of total (or tensor) degree `degree` over the
/// joint box, projected with `projection_rule`.
pub fn build_pce(
    model: &dyn ObservationMap,
    degree: usize,
    truncation: Truncation,
    projection_rule: &QuadratureRule,
    lower: &[f64],
    upper: &[f64],
) -> Result<Surrogate> {
    let dim = model.param_dim() + model.design_dim();
    if projection_rule.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: projection_rule.dim(),
            context: "projection rule",
        });
    }
    check_box(lower, upper, dim)?;
    let values = sample_model(model, projection_rule)?;
    let unit: Vec<Vec<f64>> = projection_rule
        .nodes()
        .map(|z| to_unit(z, lower, upper, "polynomial chaos box"))
        .collect::<Result<_>>()?;
    let indices = multi_indices(dim, degree, truncation);
    // orthonormal basis: the denominator is the box volume, so use
    // probability weights directly
    let vol: f64 = lower.iter().zip(upper).map(|(a, b)| b - a).product();
    let tables: Vec<Vec<Vec<f64>>> = unit
        .iter()
        .map(|u| u.iter().map(|v| orthonormal_legendre(degree, *v)).collect())
        .collect();
    let p = model.data_dim();
    let coefficients = indices
        .iter()
        .map(|j| {
            let mut num = vec![CompensatedSum::new(); p];
            for ((t, w), g) in tables.iter().zip(projection_rule.weights()).zip(&values) {
                let psi: f64 = j.iter().enumerate().map(|(k, &jk)| t[k][jk]).product();
                for (n, gk) in num.iter_mut().zip(g) {
                    n.add(w / vol * gk * psi);
                }
            }
            num.iter().map(CompensatedSum::value).collect()
        })
        .collect();
    let n_terms = indices.len();
    Ok(Surrogate {
        kind: SurrogateKind::Pce {
            degree,
            truncation,
            n_terms,
        },
        level_param: degree,
        source_tag: model.tag(),
        param_dim: model.param_dim(),
        design_dim: model.design_dim(),
        data_dim: p,
        repr: Repr::Pce(PceExpansion {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            degree,
            truncation,
            data_dim: p,
            indices,
            coefficients,
        }),
    })
}

impl Surrogate {
    pub fn pce(&self) -> Option<&PceExpansion> {
        match &self.repr {
            Repr::Pce(p) => Some(p),
            _ => None,
        }
    }

    pub fn sparse(&self) -> Option<&SparseGrid> {
        match &self.repr {
            Repr::Sparse(g) => Some(g),
            _ => None,
        }
    }
}
