//! Convergence studies of surrogate utilities against the true utility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{expected_sq_distance, GaussianDist};
use crate::eig::{eig_value, DesignSamples, EigRules};
use crate::error::{Error, Result};
use crate::models::{gamma_l4_moment, ObservationMap};
use crate::numeric::affine_least_squares;
use crate::quadrature::QuadratureRule;

/// Slack allowed on quadrature-evaluated inequalities.
pub const BOUND_SLACK: f64 = 1e-8;

/// Error values below this are treated as saturated and left out of rate fits.
pub const DEFAULT_FLOOR: f64 = 1e-7;

/// Tensor grid of designs, flattened with the first axis varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignGrid {
    axes: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
}

impl DesignGrid {
    pub fn from_axes(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(Vec::is_empty) {
            return Err(Error::EmptyGrid);
        }
        for a in &axes {
            if a.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Config("design axis nodes must be strictly increasing".into()));
            }
        }
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            points = points
                .iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        Ok(Self { axes, points })
    }

    /// `n` equidistant nodes per axis on the box, endpoints included.
    pub fn uniform(lower: &[f64], upper: &[f64], n: usize) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || n == 0 {
            return Err(Error::EmptyGrid);
        }
        let axes = lower
            .iter()
            .zip(upper)
            .map(|(a, b)| {
                if n == 1 {
                    vec![0.5 * (a + b)]
                } else {
                    (0..n)
                        .map(|k| if k + 1 == n { *b } else { a + (b - a) * (k as f64 / (n - 1) as f64) })
                        .collect()
                }
            })
            .collect();
        Self::from_axes(axes)
    }

    pub fn single(point: Vec<f64>) -> Result<Self> {
        Self::from_axes(point.into_iter().map(|v| vec![v]).collect())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn par_map<T, F>(grid: &DesignGrid, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<T> + Sync + Send,
{
    grid.points()
        .par_iter()
        .map(|d| f(d).map_err(|e| e.at_design(d)))
        .collect()
}

/// `U(d)` on every grid point.
pub fn utilities_on_grid(
    map: &dyn ObservationMap,
    grid: &DesignGrid,
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<Vec<f64>> {
    par_map(grid, |d| eig_value(map, d, rules, noise))
}

/// `max_d |U(d) − U_N(d)|` together with the per-design errors. `truth`
/// holds precomputed `U(d)` values in grid order, when available.
pub fn sup_utility_error(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    grid: &DesignGrid,
    rules: &EigRules,
    noise: &GaussianDist,
    truth: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let u = match truth {
        Some(t) if t.len() == grid.len() => t.to_vec(),
        Some(t) => {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: t.len(),
                context: "cached utilities",
            })
        }
        None => utilities_on_grid(model, grid, rules, noise)?,
    };
    let un = utilities_on_grid(surrogate, grid, rules, noise)?;
    let errs: Vec<f64> = u.iter().zip(&un).map(|(a, b)| (a - b).abs()).collect();
    Ok((errs.iter().copied().fold(0.0, f64::max), errs))
}

/// `max_d sqrt(E_{μ₀} ‖G(X; d) − G_N(X; d)‖²_Γ)` with per-design values.
pub fn sup_l2_distance(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    grid: &DesignGrid,
    prior_rule: &QuadratureRule,
    noise: &GaussianDist,
) -> Result<(f64, Vec<f64>)> {
    let v = par_map(grid, |d| {
        Ok(expected_sq_distance(model, surrogate, d, prior_rule, noise)?.max(0.0).sqrt())
    })?;
    Ok((v.iter().copied().fold(0.0, f64::max), v))
}

/// Both sides of the utility perturbation bound at one design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionCheck {
    /// `|U − U_N|`
    pub lhs: f64,
    /// `√K √E[KL] + 2 E[KL]`
    pub rhs: f64,
    pub k: f64,
    pub expected_kl: f64,
}

impl PropositionCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_SLACK
    }
}

fn proposition_from_samples(
    s: &DesignSamples,
    rules: &EigRules,
    noise: &GaussianDist,
    lhs: f64,
) -> Result<PropositionCheck> {
    let k = s.k_constant(&rules.noise, noise)?;
    let ekl = s.expected_kl();
    Ok(PropositionCheck {
        lhs,
        rhs: k.max(0.0).sqrt() * ekl.sqrt() + 2.0 * ekl,
        k,
        expected_kl: ekl,
    })
}

/// Evaluates the perturbation bound at design `d`, all integrals on the
/// prior rule (the inner evidence shares its nodes).
pub fn proposition_bound_check(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    d: &[f64],
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<PropositionCheck> {
    let s = DesignSamples::new(model, surrogate, d, &rules.prior, noise)?;
    let (u, un) = s.utilities(&rules.noise, noise)?;
    proposition_from_samples(&s, rules, noise, (u - un).abs())
}

/// Evidence divergence against the expected likelihood divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceKlCheck {
    /// `KL(π_N(y) ‖ π(y))`
    pub lhs: f64,
    /// `E_{μ₀} KL(π_N(·|X) ‖ π(·|X))`
    pub rhs: f64,
}

impl EvidenceKlCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_SLACK
    }
}

pub fn evidence_kl_check(
    model: &dyn ObservationMap,
    surrogate: &dyn ObservationMap,
    d: &[f64],
    rules: &EigRules,
    noise: &GaussianDist,
) -> Result<EvidenceKlCheck> {
    let s = DesignSamples::new(model, surrogate, d, &rules.prior, noise)?;
    Ok(EvidenceKlCheck {
        lhs: s.evidence_kl(&rules.noise, noise)?,
        rhs: s.expected_kl(),
    })
}

/// Design with the largest value; the first (lexicographically smallest)
/// grid point wins ties.
pub fn argmax_on_grid(values: &[f64], grid: &DesignGrid) -> Result<(usize, Vec<f64>)> {
    if grid.is_empty() || values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: values.len(),
            context: "values on design grid",
        });
    }
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    Ok((best, grid.points()[best].clone()))
}

/// Least-squares fit of `log e = intercept + slope log N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    /// `q` in the optional `(log N)^q` correction.
    pub log_power: f64,
    pub used: Vec<f64>,
    /// Levels left out because their error sat below the floor.
    pub excluded: Vec<f64>,
}

/// Fits the convergence rate of `errors` against `levels`. With
/// `log_power = q > 0` the errors are divided by `(log N)^q` first.
pub fn rate_fit(levels: &[f64], errors: &[f64], log_power: f64, floor: f64) -> Result<RateFit> {
    if levels.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: levels.len(),
            got: errors.len(),
            context: "rate fit",
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    for (k, (&n, &e)) in levels.iter().zip(errors).enumerate() {
        if !(e.is_finite() && e > 0.0) {
            return Err(Error::InvalidErrorValue { index: k, value: e });
        }
        if !(n > 0.0) || (log_power != 0.0 && !(n > 1.0)) {
            return Err(Error::InvalidErrorValue { index: k, value: n });
        }
        if e < floor {
            excluded.push(n);
            continue;
        }
        let corrected = if log_power != 0.0 { e / n.ln().powf(log_power) } else { e };
        xs.push(n.ln());
        ys.push(corrected.ln());
        used.push(n);
    }
    if xs.len() < 3 {
        return Err(Error::TooFewPoints(xs.len()));
    }
    let (slope, intercept, residual) = affine_least_squares(&xs, &ys);
    Ok(RateFit {
        slope,
        intercept,
        residual,
        log_power,
        used,
        excluded,
    })
}

/// Strict decrease of a sequence.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Builds the surrogate of one ladder level; returns it with its reported `N`.
pub type SurrogateFactory =
    dyn Fn(usize) -> Result<(Box<dyn ObservationMap>, f64)> + Send + Sync;

/// Expected rate of a quantity, checked against a fitted slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeBand {
    pub reference: f64,
    pub tolerance: f64,
    /// Divide errors by `(log N)^q` before fitting.
    #[serde(default)]
    pub log_power: f64,
}

impl SlopeBand {
    pub fn contains(&self, slope: f64) -> bool {
        (slope - self.reference).abs() <= self.tolerance
    }
}

/// Which diagnostics a study evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyChecks {
    /// Perturbation bound and K at every `(N, d)`.
    #[serde(default)]
    pub proposition: bool,
    /// Evidence KL check: ladder level and number of designs.
    #[serde(default)]
    pub evidence_kl_level: Option<usize>,
    #[serde(default = "default_evidence_designs")]
    pub evidence_kl_designs: usize,
    /// Argmax tracking of the surrogate maximizer.
    #[serde(default)]
    pub argmax: bool,
    /// Both error curves must strictly decrease along the ladder.
    #[serde(default)]
    pub monotone: bool,
    /// Expected slopes of `E_N` and the L² distance.
    #[serde(default)]
    pub utility_slope: Option<SlopeBand>,
    #[serde(default)]
    pub l2_slope: Option<SlopeBand>,
    /// Upper bound on the raw log-log slope of `E_N`.
    #[serde(default)]
    pub utility_slope_max: Option<f64>,
    /// Maximal gap between the two fitted slopes.
    #[serde(default)]
    pub half_rate_gap: Option<f64>,
    /// Maximal spread `max K / min K` across the ladder.
    #[serde(default)]
    pub k_ratio_max: Option<f64>,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_evidence_designs() -> usize {
    5
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl Default for StudyChecks {
    fn default() -> Self {
        Self {
            proposition: false,
            evidence_kl_level: None,
            evidence_kl_designs: default_evidence_designs(),
            argmax: false,
            monotone: false,
            utility_slope: None,
            l2_slope: None,
            utility_slope_max: None,
            half_rate_gap: None,
            k_ratio_max: None,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Everything a study run needs, already resolved from configuration.
pub struct StudySetup {
    pub study: String,
    pub model: Box<dyn ObservationMap>,
    pub ladder: Vec<usize>,
    pub factory: Box<SurrogateFactory>,
    pub grid: DesignGrid,
    pub rules: EigRules,
    /// Rule for the L² surrogate distance.
    pub l2_rule: QuadratureRule,
    pub noise: GaussianDist,
    pub checks: StudyChecks,
    /// Refined rules and a design count for the quadrature-fidelity check.
    pub fidelity: Option<(EigRules, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub design: Vec<f64>,
    pub u: f64,
    pub u_n: f64,
    pub abs_err: f64,
    pub l2_distance: f64,
    pub proposition: Option<PropositionCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: usize,
    pub n: f64,
    pub surrogate_tag: String,
    pub sup_utility_error: f64,
    pub sup_l2_distance: f64,
    pub argmax_design: Vec<f64>,
    pub u_n_at_argmax: f64,
    pub u_at_argmax_n: f64,
    /// Bound right-hand side at the design attaining `E_N`.
    pub bound_rhs: Option<f64>,
    /// Largest `K` over the grid.
    pub k_estimate: Option<f64>,
    pub k_min: Option<f64>,
    pub proposition_violations: usize,
    pub designs: Vec<DesignRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFailure {
    pub level: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub quantity: String,
    pub log_power: f64,
    pub fit: Option<RateFit>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Reported but not counted towards the run status.
    #[serde(default)]
    pub advisory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceKlRecord {
    pub level: usize,
    pub design: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCounts {
    pub prior: usize,
    pub noise: usize,
    pub evidence: usize,
    pub l2: usize,
    pub designs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub study: String,
    pub model_tag: String,
    pub node_counts: NodeCounts,
    pub true_argmax: Vec<f64>,
    pub true_max: f64,
    /// `sup_d E_{μ₀} ‖G(X; d)‖⁴_Γ` on the prior rule.
    pub l4_moment_sup: f64,
    pub levels: Vec<LevelRecord>,
    pub failures: Vec<LevelFailure>,
    pub rates: Vec<RateRecord>,
    pub evidence_kl: Vec<EvidenceKlRecord>,
    pub checks: Vec<CheckResult>,
}

impl StabilityReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks.iter().all(|c| c.passed || c.advisory)
    }

    pub fn rate(&self, quantity: &str, log_power: f64) -> Option<&RateFit> {
        self.rates
            .iter()
            .find(|r| r.quantity == quantity && r.log_power == log_power)
            .and_then(|r| r.fit.as_ref())
    }

    pub fn true_utilities(&self) -> Vec<f64> {
        self.levels
            .first()
            .map(|l| l.designs.iter().map(|d| d.u).collect())
            .unwrap_or_default()
    }
}

/// Evenly spread grid indices used for spot checks.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    (0..count).map(|k| (2 * k + 1) * len / (2 * count)).collect()
}

fn run_level(
    setup: &StudySetup,
    level: usize,
    truth: &[f64],
) -> Result<LevelRecord> {
    let (surrogate, n) = (setup.factory)(level)?;
    let surrogate: &dyn ObservationMap = surrogate.as_ref();
    let model: &dyn ObservationMap = setup.model.as_ref();
    let rules = &setup.rules;
    let noise = &setup.noise;
    let aliased = rules.evidence.is_none();

    let per_design = par_map(&setup.grid, |d| {
        let s = DesignSamples::new(model, surrogate, d, &rules.prior, noise)?;
        let u_n = if aliased {
            s.surrogate_utility(&rules.noise, noise)?
        } else {
            eig_value(surrogate, d, rules, noise)?
        };
        let l2 = expected_sq_distance(model, surrogate, d, &setup.l2_rule, noise)?
            .max(0.0)
            .sqrt();
        Ok((s, u_n, l2))
    })?;

    let mut designs = Vec::with_capacity(setup.grid.len());
    let props: Vec<Option<PropositionCheck>> = if setup.checks.proposition {
        let inputs: Vec<(usize, &DesignSamples)> =
            per_design.iter().map(|(s, _, _)| s).enumerate().collect();
        inputs
            .par_iter()
            .map(|(k, s)| {
                let lhs = if aliased {
                    (truth[*k] - per_design[*k].1).abs()
                } else {
                    let (u, un) = s.utilities(&rules.noise, noise)?;
                    (u - un).abs()
                };
                proposition_from_samples(s, rules, noise, lhs)
                    .map(Some)
                    .map_err(|e| e.at_design(&setup.grid.points()[*k]))
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; setup.grid.len()]
    };

    for (k, ((_, u_n, l2), prop)) in per_design.iter().zip(props).enumerate() {
        designs.push(DesignRecord {
            design: setup.grid.points()[k].clone(),
            u: truth[k],
            u_n: *u_n,
            abs_err: (truth[k] - u_n).abs(),
            l2_distance: *l2,
            proposition: prop,
        });
    }

    let errs: Vec<f64> = designs.iter().map(|r| r.abs_err).collect();
    let (worst, _) = argmax_on_grid(&errs, &setup.grid)?;
    let un: Vec<f64> = designs.iter().map(|r| r.u_n).collect();
    let (star, star_d) = argmax_on_grid(&un, &setup.grid)?;
    let ks: Vec<f64> = designs
        .iter()
        .filter_map(|r| r.proposition.map(|p| p.k))
        .collect();
    Ok(LevelRecord {
        level,
        n,
        surrogate_tag: surrogate.tag(),
        sup_utility_error: errs.iter().copied().fold(0.0, f64::max),
        sup_l2_distance: designs.iter().map(|r| r.l2_distance).fold(0.0, f64::max),
        argmax_design: star_d,
        u_n_at_argmax: un[star],
        u_at_argmax_n: truth[star],
        bound_rhs: designs[worst].proposition.map(|p| p.rhs),
        k_estimate: ks.iter().copied().reduce(f64::max),
        k_min: ks.iter().copied().reduce(f64::min),
        proposition_violations: designs
            .iter()
            .filter(|r| r.proposition.is_some_and(|p| !p.holds()))
            .count(),
        designs,
    })
}

fn fit_record(levels: &[f64], errors: &[f64], quantity: &str, log_power: f64, floor: f64) -> RateRecord {
    match rate_fit(levels, errors, log_power, floor) {
        Ok(fit) => RateRecord {
            quantity: quantity.into(),
            log_power,
            note: (!fit.excluded.is_empty())
                .then(|| format!("{} level(s) below the {floor:e} floor excluded", fit.excluded.len())),
            fit: Some(fit),
        },
        Err(e) => RateRecord {
            quantity: quantity.into(),
            log_power,
            fit: None,
            note: Some(format!("slope undefined: {e}")),
        },
    }
}

/// Re-evaluates utilities with refined rules at a few designs. The strict
/// comparison of `U` alone is advisory; the gating one compares the error
/// `|U - U_N|` of the finest level under both fidelities.
fn fidelity_checks(
    setup: &StudySetup,
    fine: &EigRules,
    count: usize,
    truth: &[f64],
    e_n: &[f64],
) -> Vec<CheckResult> {
    let smallest = e_n.iter().copied().fold(f64::INFINITY, f64::min);
    let model: &dyn ObservationMap = setup.model.as_ref();
    let Some(&top) = setup.ladder.last() else {
        return Vec::new();
    };
    let idx = spread_indices(setup.grid.len(), count);
    let result = (setup.factory)(top).and_then(|(s, _)| {
        idx.par_iter()
            .map(|&k| {
                let d = &setup.grid.points()[k];
                let run = || -> Result<(f64, f64)> {
                    let u_fine = eig_value(model, d, fine, &setup.noise)?;
                    let un_fine = eig_value(s.as_ref(), d, fine, &setup.noise)?;
                    let un = eig_value(s.as_ref(), d, &setup.rules, &setup.noise)?;
                    let shift = ((u_fine - un_fine).abs() - (truth[k] - un).abs()).abs();
                    Ok(((u_fine - truth[k]).abs(), shift))
                };
                run().map_err(|e| e.at_design(d))
            })
            .collect::<Result<Vec<_>>>()
    });
    match result {
        Ok(v) => {
            let du = v.iter().map(|p| p.0).fold(0.0, f64::max);
            let de = v.iter().map(|p| p.1).fold(0.0, f64::max);
            vec![
                CheckResult {
                    advisory: true,
                    name: "quadrature_fidelity_utility".into(),
                    passed: du < smallest,
                    detail: format!(
                        "max |U_fine - U| = {du:.3e} over {} designs, smallest E_N = {smallest:.3e}",
                        v.len()
                    ),
                },
                CheckResult {
                    advisory: false,
                    name: "quadrature_fidelity_error".into(),
                    passed: de < smallest,
                    detail: format!(
                        "max shift of |U - U_N| at N level {top} = {de:.3e}, smallest E_N = {smallest:.3e}"
                    ),
                },
            ]
        }
        Err(e) => vec![CheckResult {
            advisory: false,
            name: "quadrature_fidelity_error".into(),
            passed: false,
            detail: e.to_string(),
        }],
    }
}

/// Runs the full ladder: true utilities once, then every surrogate level,
/// rate fits and the configured checks. Level failures are collected rather
/// than aborting the run.
pub fn run_study(setup: &StudySetup) -> Result<StabilityReport> {
    let model: &dyn ObservationMap = setup.model.as_ref();
    let truth = utilities_on_grid(model, &setup.grid, &setup.rules, &setup.noise)?;
    let (true_idx, true_argmax) = argmax_on_grid(&truth, &setup.grid)?;
    let l4 = par_map(&setup.grid, |d| {
        gamma_l4_moment(model, d, &setup.rules.prior, &setup.noise)
    })?
    .into_iter()
    .fold(0.0, f64::max);

    let mut levels = Vec::new();
    let mut failures = Vec::new();
    for &level in &setup.ladder {
        match run_level(setup, level, &truth) {
            Ok(r) => levels.push(r),
            Err(e) => failures.push(LevelFailure {
                level,
                error: e.to_string(),
            }),
        }
    }

    let checks_cfg = &setup.checks;
    let ns: Vec<f64> = levels.iter().map(|l| l.n).collect();
    let e_n: Vec<f64> = levels.iter().map(|l| l.sup_utility_error).collect();
    let l2: Vec<f64> = levels.iter().map(|l| l.sup_l2_distance).collect();
    let mut powers = vec![0.0];
    for band in [checks_cfg.utility_slope, checks_cfg.l2_slope].into_iter().flatten() {
        if !powers.contains(&band.log_power) {
            powers.push(band.log_power);
        }
    }
    let mut rates = Vec::new();
    for &q in &powers {
        rates.push(fit_record(&ns, &e_n, "sup_utility_error", q, checks_cfg.floor));
        rates.push(fit_record(&ns, &l2, "sup_l2_distance", q, checks_cfg.floor));
    }

    let mut evidence_kl = Vec::new();
    let mut checks = Vec::new();
    if let Some(level) = checks_cfg.evidence_kl_level {
        let result = (setup.factory)(level).and_then(|(s, _)| {
            spread_indices(setup.grid.len(), checks_cfg.evidence_kl_designs)
                .into_iter()
                .map(|k| {
                    let d = &setup.grid.points()[k];
                    evidence_kl_check(model, s.as_ref(), d, &setup.rules, &setup.noise).map(|c| {
                        EvidenceKlRecord {
                            level,
                            design: d.clone(),
                            lhs: c.lhs,
                            rhs: c.rhs,
                            holds: c.holds(),
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()
        });
        match result {
            Ok(v) => {
                let ok = v.iter().all(|r| r.holds);
                checks.push(CheckResult {
                    advisory: false,
                    name: "evidence_kl_bound".into(),
                    passed: ok,
                    detail: v
                        .iter()
                        .map(|r| format!("{:?}: {:.3e} <= {:.3e}", r.design, r.lhs, r.rhs))
                        .collect::<Vec<_>>()
                        .join("; "),
                });
                evidence_kl = v;
            }
            Err(e) => checks.push(CheckResult {
                advisory: false,
                name: "evidence_kl_bound".into(),
                passed: false,
                detail: e.to_string(),
            }),
        }
    }

    if checks_cfg.proposition {
        let violations: usize = levels.iter().map(|l| l.proposition_violations).sum();
        let worst = levels
            .iter()
            .flat_map(|l| l.designs.iter())
            .filter_map(|r| r.proposition)
            .map(|p| p.lhs - p.rhs)
            .fold(f64::NEG_INFINITY, f64::max);
        checks.push(CheckResult {
            advisory: false,
            name: "proposition_bound".into(),
            passed: violations == 0 && !levels.is_empty(),
            detail: format!("{violations} violation(s); max lhs - rhs = {worst:.3e}"),
        });
        if let Some(max_ratio) = checks_cfg.k_ratio_max {
            let ks: Vec<f64> = levels.iter().filter_map(|l| l.k_estimate).collect();
            let hi = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = ks.iter().copied().fold(f64::INFINITY, f64::min);
            let ratio = hi / lo;
            checks.push(CheckResult {
                advisory: false,
                name: "k_bounded".into(),
                passed: ratio.is_finite() && ratio < max_ratio,
                detail: format!("max K {hi:.6e}, min K {lo:.6e}, ratio {ratio:.4}"),
            });
        }
    }

    if checks_cfg.monotone {
        checks.push(CheckResult {
            advisory: false,
            name: "utility_error_decreasing".into(),
            passed: strictly_decreasing(&e_n) && e_n.len() >= 2,
            detail: format!("{e_n:?}"),
        });
        checks.push(CheckResult {
            advisory: false,
            name: "l2_distance_decreasing".into(),
            passed: strictly_decreasing(&l2) && l2.len() >= 2,
            detail: format!("{l2:?}"),
        });
    }

    let slope_of = |quantity: &str, q: f64| {
        rates
            .iter()
            .find(|r| r.quantity == quantity && r.log_power == q)
            .and_then(|r| r.fit.as_ref())
            .map(|f| f.slope)
    };
    for (name, quantity, band) in [
        ("utility_slope", "sup_utility_error", checks_cfg.utility_slope),
        ("l2_slope", "sup_l2_distance", checks_cfg.l2_slope),
    ] {
        if let Some(band) = band {
            let slope = slope_of(quantity, band.log_power);
            checks.push(CheckResult {
                advisory: false,
                name: name.into(),
                passed: slope.is_some_and(|s| band.contains(s)),
                detail: format!(
                    "slope {:?} (log power {}) against {} ± {}",
                    slope, band.log_power, band.reference, band.tolerance
                ),
            });
        }
    }
    if let Some(max) = checks_cfg.utility_slope_max {
        let slope = slope_of("sup_utility_error", 0.0);
        checks.push(CheckResult {
            advisory: false,
            name: "utility_slope_raw".into(),
            passed: slope.is_some_and(|s| s <= max),
            detail: format!("slope {slope:?} <= {max}"),
        });
    }
    if let Some(gap) = checks_cfg.half_rate_gap {
        let a = slope_of("sup_utility_error", 0.0);
        let b = slope_of("sup_l2_distance", 0.0);
        let passed = matches!((a, b), (Some(a), Some(b)) if (a - b).abs() <= gap);
        checks.push(CheckResult {
            advisory: false,
            name: "half_rate_law".into(),
            passed,
            detail: format!("utility slope {a:?}, l2 slope {b:?}, allowed gap {gap}"),
        });
    }

    if checks_cfg.argmax {
        let matching: Vec<bool> = levels.iter().map(|l| l.argmax_design == true_argmax).collect();
        let n0 = (0..matching.len()).find(|&k| matching[k..].iter().all(|m| *m));
        let (passed, detail) = match n0 {
            Some(k) => {
                let bad: Vec<f64> = levels[k..]
                    .iter()
                    .filter(|l| (l.u_n_at_argmax - truth[true_idx]).abs() > 2.0 * l.sup_utility_error)
                    .map(|l| l.n)
                    .collect();
                (
                    bad.is_empty(),
                    format!(
                        "argmax {:?} stable from N = {}; value gap above 2 E_N at {:?}",
                        true_argmax, levels[k].n, bad
                    ),
                )
            }
            None => (false, format!("surrogate argmax never settles on {true_argmax:?}")),
        };
        checks.push(CheckResult {
            advisory: false,
            name: "argmax_tracking".into(),
            passed,
            detail,
        });
    }

    if let Some((fine, count)) = &setup.fidelity {
        checks.extend(fidelity_checks(setup, fine, *count, &truth, &e_n));
    }

    checks.push(CheckResult {
        advisory: false,
        name: "l4_moment_finite".into(),
        passed: l4.is_finite(),
        detail: format!("sup_d E|G|^4 = {l4:.6e}"),
    });

    Ok(StabilityReport {
        study: setup.study.clone(),
        model_tag: model.tag(),
        node_counts: NodeCounts {
            prior: setup.rules.prior.len(),
            noise: setup.rules.noise.len(),
            evidence: setup.rules.evidence_rule().len(),
            l2: setup.l2_rule.len(),
            designs: setup.grid.len(),
        },
        true_argmax,
        true_max: truth[true_idx],
        l4_moment_sup: l4,
        levels,
        failures,
        rates,
        evidence_kl,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::eig_error_example1;
    use crate::models::{ForwardModel, PriorSpec};
    use crate::quadrature::{gauss_hermite, smolyak, trapezoid, GaussHermiteFamily};
    use crate::surrogate::build_pl_x;
    use approx::assert_abs_diff_eq;

    fn analytic_rules() -> EigRules {
        EigRules::new(
            trapezoid(201, 0.0, 1.0).unwrap(),
            smolyak(2, 4, &GaussHermiteFamily).unwrap(),
        )
    }

    #[test]
    fn design_grid_ordering() {
        let g = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.points()[0], vec![0.0, 0.0]);
        assert_eq!(g.points()[1], vec![0.0, 0.5]);
        assert_eq!(g.points()[8], vec![1.0, 1.0]);
        assert!(DesignGrid::from_axes(vec![vec![]]).is_err());
    }

    #[test]
    fn argmax_examples() {
        let g = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 3).unwrap();
        assert_eq!(argmax_on_grid(&[2.0; 9], &g).unwrap().1, vec![0.0, 0.0]);
        let one = DesignGrid::single(vec![0.3, 0.4]).unwrap();
        assert_eq!(argmax_on_grid(&[-1.0], &one).unwrap().1, vec![0.3, 0.4]);
        let mut v = vec![0.0; 9];
        v[5] = 1.0;
        v[7] = 1.0;
        assert_eq!(argmax_on_grid(&v, &g).unwrap().0, 5);
        assert!(matches!(argmax_on_grid(&[], &g), Err(Error::EmptyGrid)));
    }

    #[test]
    fn rate_fit_examples() {
        let ns = [4.0, 8.0, 16.0, 32.0, 64.0];
        let e: Vec<f64> = ns.iter().map(|n: &f64| 3.0 * n.powi(-2)).collect();
        let f = rate_fit(&ns, &e, 0.0, DEFAULT_FLOOR).unwrap();
        assert_abs_diff_eq!(f.slope, -2.0, epsilon = 1e-12);
        let e: Vec<f64> = ns.iter().map(|n: &f64| 0.1 * n.powi(-2) * n.ln().powi(6)).collect();
        let f = rate_fit(&ns, &e, 6.0, 0.0).unwrap();
        assert_abs_diff_eq!(f.slope, -2.0, epsilon = 1e-12);
        assert!(matches!(rate_fit(&ns[..2], &e[..2], 0.0, 0.0), Err(Error::TooFewPoints(2))));
        assert!(matches!(
            rate_fit(&ns, &[1.0, 0.0, 1.0, 1.0, 1.0], 0.0, 0.0),
            Err(Error::InvalidErrorValue { index: 1, .. })
        ));
        let floored = rate_fit(&ns, &[1e-2, 1e-3, 1e-4, 1e-5, 1e-8], 0.0, DEFAULT_FLOOR).unwrap();
        assert_eq!(floored.excluded, vec![64.0]);
        assert_eq!(floored.used.len(), 4);
    }

    #[test]
    fn identical_surrogate_has_zero_error() {
        let m = ForwardModel::analytic();
        let g = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 3).unwrap();
        let noise = GaussianDist::isotropic(2, 1e-4).unwrap();
        let rules = analytic_rules();
        let (e, errs) = sup_utility_error(&m, &m, &g, &rules, &noise, None).unwrap();
        assert!(e < 1e-12 && errs.len() == 9);
        let (l2, _) = sup_l2_distance(&m, &m, &g, &rules.prior, &noise).unwrap();
        assert_eq!(l2, 0.0);
        let p = proposition_bound_check(&m, &m, &[1.0, 1.0], &rules, &noise).unwrap();
        assert_eq!((p.lhs, p.rhs), (0.0, 0.0));
        let c = evidence_kl_check(&m, &m, &[1.0, 1.0], &rules, &noise).unwrap();
        assert!(c.lhs.abs() < 1e-12 && c.rhs == 0.0);
    }

    #[test]
    fn coarse_and_fine_surrogates_are_ordered() {
        let m = ForwardModel::analytic();
        let g = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 3).unwrap();
        let noise = GaussianDist::isotropic(2, 1e-4).unwrap();
        let rules = analytic_rules();
        let truth = utilities_on_grid(&m, &g, &rules, &noise).unwrap();
        let e9 = sup_utility_error(&m, &build_pl_x(&m, 9).unwrap(), &g, &rules, &noise, Some(&truth))
            .unwrap()
            .0;
        let e257 = sup_utility_error(&m, &build_pl_x(&m, 257).unwrap(), &g, &rules, &noise, Some(&truth))
            .unwrap()
            .0;
        assert!(e9 > e257, "{e9} vs {e257}");
    }

    #[test]
    fn proposition_holds_for_piecewise_linear() {
        let m = ForwardModel::analytic();
        let s = build_pl_x(&m, 8).unwrap();
        let noise = GaussianDist::isotropic(2, 1e-4).unwrap();
        let p = proposition_bound_check(&m, &s, &[1.0, 1.0], &analytic_rules(), &noise).unwrap();
        assert!(p.holds(), "{p:?}");
        assert!(p.k.is_finite() && p.k > 0.0);
    }

    #[test]
    fn l2_distance_is_scale_invariant() {
        let m = ForwardModel::analytic();
        let s = build_pl_x(&m, 4).unwrap();
        let m2 = ForwardModel::custom("scaled", 1, 2, 2, |x, d| {
            crate::models::analytic_g(x[0], [d[0], d[1]]).map(|v| 2.0 * v).to_vec()
        });
        let s2 = ForwardModel::custom("scaled_surrogate", 1, 2, 2, move |x, d| {
            s.observe(x, d).unwrap().iter().map(|v| 2.0 * v).collect()
        });
        let s1 = build_pl_x(&m, 4).unwrap();
        let g = DesignGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], 4).unwrap();
        let rule = trapezoid(1001, 0.0, 1.0).unwrap();
        let a = sup_l2_distance(&m, &s1, &g, &rule, &GaussianDist::isotropic(2, 1e-4).unwrap()).unwrap().0;
        let b = sup_l2_distance(&m2, &s2, &g, &rule, &GaussianDist::isotropic(2, 4e-4).unwrap()).unwrap().0;
        assert!(((a - b) / a).abs() < 1e-10);
    }

    #[test]
    fn scalar_example_single_design() {
        let noise = GaussianDist::standard(1).unwrap();
        let rules = EigRules::new(
            PriorSpec::standard_normal(1).quadrature(64).unwrap(),
            gauss_hermite(64).unwrap(),
        );
        let g = DesignGrid::single(vec![0.0]).unwrap();
        let (e, _) = sup_utility_error(
            &ForwardModel::scalar_linear(1.0),
            &ForwardModel::scalar_linear(1.1),
            &g,
            &rules,
            &noise,
            None,
        )
        .unwrap();
        assert!((e - eig_error_example1(1.0, 1.1)).abs() < 2e-6);
    }

    #[test]
    fn spread_indices_are_distinct() {
        let v = spread_indices(121, 5);
        assert_eq!(v.len(), 5);
        assert!(v.windows(2).all(|w| w[0] < w[1]) && *v.last().unwrap() < 121);
    }
}
