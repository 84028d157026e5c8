//! Experiment configuration: TOML schema, presets and resolution into a
//! runnable study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::divergence::GaussianDist;
use crate::eig::EigRules;
use crate::error::{Error, Result};
use crate::models::{ForwardModel, HeatConfig, ModelKind, ObservationMap, PriorSpec};
use crate::quadrature::{
    clenshaw_curtis, gauss_hermite, gauss_legendre, smolyak, tensor_all, trapezoid,
    ClenshawCurtisFamily, GaussHermiteFamily, GaussLegendreFamily, Growth, QuadratureRule,
};
use crate::stability::{DesignGrid, SlopeBand, StudyChecks, StudySetup};
use crate::surrogate::{build_pce, build_pl_x, build_sparse_multilinear, Truncation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Example1Scalar,
    AnalyticPlx,
    AnalyticSparse,
    HeatPce,
    Custom,
}

impl StudyKind {
    pub const PRESETS: [StudyKind; 4] = [
        StudyKind::Example1Scalar,
        StudyKind::AnalyticPlx,
        StudyKind::AnalyticSparse,
        StudyKind::HeatPce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Example1Scalar => "example1_scalar",
            StudyKind::AnalyticPlx => "analytic_plx",
            StudyKind::AnalyticSparse => "analytic_sparse",
            StudyKind::HeatPce => "heat_pce",
            StudyKind::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::PRESETS.into_iter().chain([StudyKind::Custom]).find(|k| k.name() == name)
    }

    pub fn description(self) -> &'static str {
        match self {
            StudyKind::Example1Scalar => "scalar linear map G(x) = a x against a_N = a + 1/N",
            StudyKind::AnalyticPlx => "two-output analytic map, piecewise-linear interpolation in x",
            StudyKind::AnalyticSparse => "two-output analytic map, sparse multilinear interpolation on X x D",
            StudyKind::HeatPce => "heat-equation sensor model, Legendre chaos on the joint box",
            StudyKind::Custom => "fully user-specified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// A quadrature rule, built relative to the measure it is used for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    /// Tensor trapezoid rule, `n` nodes per axis.
    Trapezoid { n: usize },
    GaussLegendre { n: usize },
    GaussHermite { n: usize },
    ClenshawCurtis { level: usize },
    SmolyakGaussHermite { level: usize },
    SmolyakClenshawCurtis { level: usize },
    SmolyakGaussLegendre {
        level: usize,
        #[serde(default = "default_growth")]
        growth: Growth,
    },
}

fn default_growth() -> Growth {
    Growth::Linear
}

fn common_interval(lower: &[f64], upper: &[f64]) -> Result<(f64, f64)> {
    let (a, b) = (lower[0], upper[0]);
    if lower.iter().all(|v| *v == a) && upper.iter().all(|v| *v == b) {
        Ok((a, b))
    } else {
        Err(Error::Config("Smolyak rules on a box need identical intervals on every axis".into()))
    }
}

impl RuleSpec {
    /// Rule for the Lebesgue measure on the box.
    pub fn on_box(&self, lower: &[f64], upper: &[f64]) -> Result<QuadratureRule> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Config("rule box bounds must be non-empty and of equal length".into()));
        }
        let per_axis = |f: &dyn Fn(f64, f64) -> Result<QuadratureRule>| {
            let rules = lower.iter().zip(upper).map(|(a, b)| f(*a, *b)).collect::<Result<Vec<_>>>()?;
            tensor_all(&rules)
        };
        let dim = lower.len();
        match *self {
            RuleSpec::Trapezoid { n } => per_axis(&|a, b| trapezoid(n, a, b)),
            RuleSpec::GaussLegendre { n } => per_axis(&|a, b| gauss_legendre(n, a, b)),
            RuleSpec::ClenshawCurtis { level } => per_axis(&|a, b| clenshaw_curtis(level, a, b)),
            RuleSpec::SmolyakClenshawCurtis { level } => {
                let (a, b) = common_interval(lower, upper)?;
                smolyak(dim, level, &ClenshawCurtisFamily { a, b })
            }
            RuleSpec::SmolyakGaussLegendre { level, growth } => {
                let (a, b) = common_interval(lower, upper)?;
                smolyak(dim, level, &GaussLegendreFamily { a, b, growth })
            }
            RuleSpec::GaussHermite { .. } | RuleSpec::SmolyakGaussHermite { .. } => Err(Error::Config(
                "Gauss-Hermite rules integrate against a Gaussian, not a box".into(),
            )),
        }
    }

    /// Rule for `N(0, I)` in `dim` dimensions.
    pub fn standard_normal(&self, dim: usize) -> Result<QuadratureRule> {
        match *self {
            RuleSpec::GaussHermite { n } => tensor_all(&vec![gauss_hermite(n)?; dim]),
            RuleSpec::SmolyakGaussHermite { level } => smolyak(dim, level, &GaussHermiteFamily),
            _ => Err(Error::Config("Gaussian integrals need a Gauss-Hermite rule".into())),
        }
    }

    /// Rule for the prior law.
    pub fn on_prior(&self, prior: &PriorSpec) -> Result<QuadratureRule> {
        prior.validate()?;
        match prior {
            PriorSpec::UniformBox { lower, upper } => self.on_box(lower, upper),
            PriorSpec::Gaussian { .. } => prior.map_standard_rule(&self.standard_normal(prior.dim())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Outer and (by default) inner rule over the parameter.
    pub prior: Option<RuleSpec>,
    /// Rule over the standardized noise.
    pub noise: Option<RuleSpec>,
    /// Separate inner evidence rule.
    pub evidence: Option<RuleSpec>,
    /// Rule for the L² surrogate distance.
    pub l2: Option<RuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedQuadrature {
    pub prior: RuleSpec,
    pub noise: RuleSpec,
    pub evidence: Option<RuleSpec>,
    pub l2: RuleSpec,
}

/// Design grid: a box with `n_per_axis` equidistant nodes, or explicit axes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub n_per_axis: Option<usize>,
    pub axes: Option<Vec<Vec<f64>>>,
}

impl GridSpec {
    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>, n: usize) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
            n_per_axis: Some(n),
            axes: None,
        }
    }

    pub fn build(&self) -> Result<DesignGrid> {
        match (&self.axes, &self.lower, &self.upper, self.n_per_axis) {
            (Some(axes), None, None, None) => DesignGrid::from_axes(axes.clone()),
            (None, Some(l), Some(u), Some(n)) => DesignGrid::uniform(l, u, n),
            _ => Err(Error::Config(
                "design_grid needs either `axes` or all of `lower`, `upper`, `n_per_axis`".into(),
            )),
        }
    }
}

/// Zero-mean Gaussian noise: isotropic `variance` or a full `cov`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub variance: Option<f64>,
    pub cov: Option<Vec<Vec<f64>>>,
}

impl NoiseSpec {
    pub fn isotropic(variance: f64) -> Self {
        Self {
            variance: Some(variance),
            cov: None,
        }
    }

    pub fn build(&self, dim: usize) -> Result<GaussianDist> {
        match (self.variance, &self.cov) {
            (Some(v), None) => GaussianDist::isotropic(dim, v),
            (None, Some(c)) => GaussianDist::from_rows(vec![0.0; c.len()], c),
            _ => Err(Error::Config("noise needs exactly one of `variance` or `cov`".into())),
        }
    }
}

/// How each ladder level is turned into a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateSpec {
    /// Piecewise-linear interpolation in `x` with `N` intervals.
    PlX,
    /// Sparse multilinear interpolation of level `N` on the joint box.
    SparseMultilinear { lower: Vec<f64>, upper: Vec<f64> },
    /// Legendre chaos of degree `N` on the joint box. Without `projection`,
    /// a Gauss-Legendre tensor rule with `max(10, N + 2)` nodes per axis.
    Pce {
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default)]
        truncation: Truncation,
        #[serde(default)]
        projection: Option<RuleSpec>,
    },
    /// Scalar linear map with slope `a + 1/N`.
    ScalarPerturbation,
}

/// Refined rules used to confirm that `U` is resolved well below the
/// smallest measured `E_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySpec {
    pub prior: RuleSpec,
    pub noise: RuleSpec,
    #[serde(default = "default_fidelity_designs")]
    pub designs: usize,
}

fn default_fidelity_designs() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example1Spec {
    #[serde(default = "default_a")]
    pub a: f64,
}

fn default_a() -> f64 {
    1.0
}

impl Default for Example1Spec {
    fn default() -> Self {
        Self { a: default_a() }
    }
}

/// Experiment file as written by the user. Missing sections are filled from
/// the study preset at the chosen scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    #[serde(default)]
    pub scale: Scale,
    pub ladder: Option<Vec<usize>>,
    pub design_grid: Option<GridSpec>,
    pub quadrature: Option<QuadratureSpec>,
    pub noise: Option<NoiseSpec>,
    pub prior: Option<PriorSpec>,
    pub model: Option<ModelKind>,
    pub surrogate: Option<SurrogateSpec>,
    pub heat: Option<HeatConfig>,
    pub example1: Option<Example1Spec>,
    pub checks: Option<StudyChecks>,
    pub fidelity: Option<FidelitySpec>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Configuration with every default applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub study: StudyKind,
    pub scale: Scale,
    pub ladder: Vec<usize>,
    pub design_grid: GridSpec,
    pub quadrature: ResolvedQuadrature,
    pub noise: NoiseSpec,
    pub prior: PriorSpec,
    pub model: ModelKind,
    pub surrogate: SurrogateSpec,
    pub checks: StudyChecks,
    pub fidelity: Option<FidelitySpec>,
    pub output_dir: Option<PathBuf>,
    pub threads: usize,
}

/// Parses TOML text; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn check_ladder(ladder: &[usize]) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::Config("ladder is empty".into()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ladder not increasing".into()));
    }
    Ok(())
}

fn band(reference: f64, tolerance: f64, log_power: f64) -> Option<SlopeBand> {
    Some(SlopeBand {
        reference,
        tolerance,
        log_power,
    })
}

/// Defaults of a study at a scale. `Custom` has none.
pub fn preset(study: StudyKind, scale: Scale) -> Option<ResolvedConfig> {
    let paper = scale == Scale::Paper;
    let threads = default_threads();
    let cfg = match study {
        StudyKind::Example1Scalar => ResolvedConfig {
            study,
            scale,
            ladder: vec![2, 4, 8, 16],
            design_grid: GridSpec {
                axes: Some(vec![vec![0.0]]),
                ..Default::default()
            },
            quadrature: ResolvedQuadrature {
                prior: RuleSpec::GaussHermite { n: 64 },
                noise: RuleSpec::GaussHermite { n: 64 },
                evidence: None,
                l2: RuleSpec::GaussHermite { n: 64 },
            },
            noise: NoiseSpec::isotropic(1.0),
            prior: PriorSpec::standard_normal(1),
            model: ModelKind::ScalarLinear { a: 1.0 },
            surrogate: SurrogateSpec::ScalarPerturbation,
            checks: StudyChecks {
                proposition: true,
                monotone: true,
                utility_slope: band(-1.0, 0.05, 0.0),
                l2_slope: band(-1.0, 0.05, 0.0),
                ..Default::default()
            },
            fidelity: None,
            output_dir: None,
            threads,
        },
        StudyKind::AnalyticPlx => ResolvedConfig {
            study,
            scale,
            ladder: if paper {
                vec![2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
            } else {
                vec![4, 8, 16, 32, 64, 128]
            },
            design_grid: GridSpec::uniform(vec![0.0, 0.0], vec![1.0, 1.0], if paper { 21 } else { 11 }),
            quadrature: ResolvedQuadrature {
                prior: RuleSpec::Trapezoid { n: if paper { 251 } else { 201 } },
                noise: RuleSpec::SmolyakGaussHermite { level: if paper { 12 } else { 3 } },
                evidence: None,
                l2: RuleSpec::Trapezoid { n: 1001 },
            },
            noise: NoiseSpec::isotropic(1e-4),
            prior: PriorSpec::uniform_box(vec![0.0], vec![1.0]),
            model: ModelKind::Analytic2Out,
            surrogate: SurrogateSpec::PlX,
            checks: StudyChecks {
                proposition: true,
                evidence_kl_level: Some(8),
                evidence_kl_designs: 5,
                argmax: true,
                monotone: true,
                utility_slope: band(-2.0, 0.4, 0.0),
                l2_slope: band(-2.0, 0.4, 0.0),
                half_rate_gap: Some(0.5),
                k_ratio_max: Some(2.0),
                ..Default::default()
            },
            fidelity: Some(FidelitySpec {
                prior: RuleSpec::Trapezoid { n: if paper { 501 } else { 401 } },
                noise: RuleSpec::SmolyakGaussHermite { level: if paper { 13 } else { 4 } },
                designs: 5,
            }),
            output_dir: None,
            threads,
        },
        StudyKind::AnalyticSparse => ResolvedConfig {
            study,
            scale,
            ladder: if paper { (2..=10).collect() } else { (2..=6).collect() },
            design_grid: GridSpec::uniform(vec![0.2, 0.2], vec![1.0, 1.0], if paper { 31 } else { 11 }),
            quadrature: ResolvedQuadrature {
                prior: RuleSpec::Trapezoid { n: if paper { 251 } else { 201 } },
                noise: RuleSpec::SmolyakGaussHermite { level: if paper { 11 } else { 3 } },
                evidence: None,
                l2: RuleSpec::Trapezoid { n: 1001 },
            },
            noise: NoiseSpec::isotropic(1e-4),
            prior: PriorSpec::uniform_box(vec![0.0], vec![1.0]),
            model: ModelKind::Analytic2Out,
            surrogate: SurrogateSpec::SparseMultilinear {
                lower: vec![0.0, 0.2, 0.2],
                upper: vec![1.0, 1.0, 1.0],
            },
            checks: StudyChecks {
                monotone: true,
                utility_slope_max: Some(-1.3),
                utility_slope: band(-2.0, 0.4, 6.0),
                ..Default::default()
            },
            fidelity: None,
            output_dir: None,
            threads,
        },
        StudyKind::HeatPce => ResolvedConfig {
            study,
            scale,
            ladder: if paper { vec![2, 4, 6, 8, 10, 12, 14] } else { vec![2, 4, 6] },
            design_grid: GridSpec::uniform(vec![0.1, 0.1], vec![0.9, 0.9], if paper { 40 } else { 11 }),
            quadrature: ResolvedQuadrature {
                prior: if paper {
                    RuleSpec::SmolyakClenshawCurtis { level: 10 }
                } else {
                    RuleSpec::GaussLegendre { n: 15 }
                },
                noise: RuleSpec::SmolyakGaussHermite { level: if paper { 3 } else { 2 } },
                evidence: None,
                l2: if paper {
                    RuleSpec::Trapezoid { n: 25 }
                } else {
                    RuleSpec::GaussLegendre { n: 15 }
                },
            },
            noise: NoiseSpec::isotropic(0.01),
            prior: PriorSpec::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]),
            model: ModelKind::HeatSensor(HeatConfig::default()),
            surrogate: SurrogateSpec::Pce {
                lower: vec![0.0; 4],
                upper: vec![1.0; 4],
                truncation: Truncation::TotalDegree,
                projection: None,
            },
            checks: StudyChecks {
                monotone: true,
                ..Default::default()
            },
            fidelity: None,
            output_dir: None,
            threads,
        },
        StudyKind::Custom => return None,
    };
    Some(cfg)
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl ExperimentConfig {
    pub fn minimal(study: StudyKind) -> Self {
        Self {
            study,
            scale: Scale::Desk,
            ladder: None,
            design_grid: None,
            quadrature: None,
            noise: None,
            prior: None,
            model: None,
            surrogate: None,
            heat: None,
            example1: None,
            checks: None,
            fidelity: None,
            output_dir: None,
            threads: None,
        }
    }

    /// Syntactic checks that do not need the preset.
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = &self.ladder {
            check_ladder(l)?;
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        if let Some(h) = &self.heat {
            h.validate()?;
        }
        if self.heat.is_some() && self.study != StudyKind::HeatPce && !matches!(self.model, Some(ModelKind::HeatSensor(_))) {
            return Err(Error::Config("`heat` only applies to heat-sensor studies".into()));
        }
        if self.example1.is_some() && self.study != StudyKind::Example1Scalar {
            return Err(Error::Config("`example1` only applies to example1_scalar".into()));
        }
        Ok(())
    }

    /// Applies the preset defaults and checks cross-field consistency.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        self.validate()?;
        let base = preset(self.study, self.scale);
        let need = |what: &str| Error::Config(format!("custom study needs `{what}`"));
        let ladder = match (&self.ladder, &base) {
            (Some(l), _) => l.clone(),
            (None, Some(b)) => b.ladder.clone(),
            (None, None) => return Err(need("ladder")),
        };
        let design_grid = match (&self.design_grid, &base) {
            (Some(g), _) => g.clone(),
            (None, Some(b)) => b.design_grid.clone(),
            (None, None) => return Err(need("design_grid")),
        };
        let q = self.quadrature.clone().unwrap_or_default();
        let bq = base.as_ref().map(|b| b.quadrature.clone());
        let pick = |v: Option<RuleSpec>, d: Option<RuleSpec>, what: &str| v.or(d).ok_or_else(|| need(what));
        let quadrature = ResolvedQuadrature {
            prior: pick(q.prior, bq.as_ref().map(|b| b.prior.clone()), "quadrature.prior")?,
            noise: pick(q.noise, bq.as_ref().map(|b| b.noise.clone()), "quadrature.noise")?,
            evidence: q.evidence.or(bq.as_ref().and_then(|b| b.evidence.clone())),
            l2: pick(q.l2, bq.as_ref().map(|b| b.l2.clone()), "quadrature.l2")?,
        };
        let noise = self
            .noise
            .clone()
            .or(base.as_ref().map(|b| b.noise.clone()))
            .ok_or_else(|| need("noise"))?;
        let prior = self
            .prior
            .clone()
            .or(base.as_ref().map(|b| b.prior.clone()))
            .ok_or_else(|| need("prior"))?;
        let mut model = self
            .model
            .clone()
            .or(base.as_ref().map(|b| b.model.clone()))
            .ok_or_else(|| need("model"))?;
        if let (Some(h), ModelKind::HeatSensor(cfg)) = (&self.heat, &mut model) {
            *cfg = h.clone();
        }
        if let (Some(e), ModelKind::ScalarLinear { a }) = (&self.example1, &mut model) {
            *a = e.a;
        }
        let surrogate = self
            .surrogate
            .clone()
            .or(base.as_ref().map(|b| b.surrogate.clone()))
            .ok_or_else(|| need("surrogate"))?;
        let checks = self
            .checks
            .clone()
            .or(base.as_ref().map(|b| b.checks.clone()))
            .unwrap_or_default();
        let resolved = ResolvedConfig {
            study: self.study,
            scale: self.scale,
            ladder,
            design_grid,
            quadrature,
            noise,
            prior,
            model,
            surrogate,
            checks,
            fidelity: self
                .fidelity
                .clone()
                .or(base.as_ref().and_then(|b| b.fidelity.clone())),
            output_dir: self.output_dir.clone(),
            threads: self.threads.unwrap_or_else(default_threads),
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

fn build_model(kind: &ModelKind) -> Result<ForwardModel> {
    match kind {
        ModelKind::Analytic2Out => Ok(ForwardModel::analytic()),
        ModelKind::ScalarLinear { a } => Ok(ForwardModel::scalar_linear(*a)),
        ModelKind::Linear { matrix } => ForwardModel::linear(matrix.clone()),
        ModelKind::HeatSensor(cfg) => ForwardModel::heat(cfg.clone()),
        ModelKind::Custom { name } => Err(Error::Config(format!(
            "model `{name}` is defined in code and cannot be built from a config file"
        ))),
    }
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<()> {
        check_ladder(&self.ladder)?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.prior.validate()?;
        let model = build_model(&self.model)?;
        if self.prior.dim() != model.param_dim() {
            return Err(Error::Config(format!(
                "prior dimension {} does not match model parameter dimension {}",
                self.prior.dim(),
                model.param_dim()
            )));
        }
        let grid = self.design_grid.build()?;
        let gd = grid.points()[0].len();
        if gd != model.design_dim() {
            return Err(Error::Config(format!(
                "design grid dimension {gd} does not match model design dimension {}",
                model.design_dim()
            )));
        }
        self.noise.build(model.data_dim()).and_then(|n| {
            if n.dim() == model.data_dim() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "noise dimension {} does not match model output dimension {}",
                    n.dim(),
                    model.data_dim()
                )))
            }
        })?;
        let joint = model.param_dim() + model.design_dim();
        match &self.surrogate {
            SurrogateSpec::PlX => {
                if model.param_dim() != 1 {
                    return Err(Error::Config("pl_x needs a scalar parameter".into()));
                }
            }
            SurrogateSpec::SparseMultilinear { lower, upper } | SurrogateSpec::Pce { lower, upper, .. } => {
                if lower.len() != joint || upper.len() != joint {
                    return Err(Error::Config(format!(
                        "surrogate box must have dimension {joint} (parameter + design)"
                    )));
                }
                for p in grid.points() {
                    for (k, v) in p.iter().enumerate() {
                        let j = model.param_dim() + k;
                        if *v < lower[j] || *v > upper[j] {
                            return Err(Error::Config(format!("design {p:?} lies outside the surrogate box")));
                        }
                    }
                }
            }
            SurrogateSpec::ScalarPerturbation => {
                if !matches!(self.model, ModelKind::ScalarLinear { .. }) {
                    return Err(Error::Config("scalar_perturbation needs the scalar_linear model".into()));
                }
            }
        }
        if matches!(self.surrogate, SurrogateSpec::PlX) && self.ladder[0] < 1 {
            return Err(Error::Config("pl_x needs at least one interval".into()));
        }
        if matches!(self.surrogate, SurrogateSpec::ScalarPerturbation) && self.ladder[0] < 1 {
            return Err(Error::Config("scalar_perturbation needs N >= 1".into()));
        }
        Ok(())
    }

    pub fn rules(&self) -> Result<(EigRules, QuadratureRule)> {
        let model = build_model(&self.model)?;
        let q = &self.quadrature;
        let mut rules = EigRules::new(q.prior.on_prior(&self.prior)?, q.noise.standard_normal(model.data_dim())?);
        if let Some(e) = &q.evidence {
            rules.evidence = Some(e.on_prior(&self.prior)?);
        }
        Ok((rules, q.l2.on_prior(&self.prior)?))
    }

    /// Builds models, rules and the surrogate factory.
    pub fn setup(&self) -> Result<StudySetup> {
        self.validate()?;
        let model = build_model(&self.model)?;
        let (rules, l2_rule) = self.rules()?;
        let noise = self.noise.build(model.data_dim())?;
        let grid = self.design_grid.build()?;
        let fidelity = match &self.fidelity {
            Some(f) => Some((
                EigRules::new(f.prior.on_prior(&self.prior)?, f.noise.standard_normal(model.data_dim())?),
                f.designs,
            )),
            None => None,
        };
        let m = model.clone();
        let factory: Box<crate::stability::SurrogateFactory> = match self.surrogate.clone() {
            SurrogateSpec::PlX => Box::new(move |n| {
                let s = build_pl_x(&m, n)?;
                Ok((Box::new(s) as Box<dyn ObservationMap>, n as f64))
            }),
            SurrogateSpec::SparseMultilinear { lower, upper } => Box::new(move |level| {
                let s = build_sparse_multilinear(&m, level, &lower, &upper)?;
                let n = s.level_param() as f64;
                Ok((Box::new(s) as Box<dyn ObservationMap>, n))
            }),
            SurrogateSpec::Pce {
                lower,
                upper,
                truncation,
                projection,
            } => Box::new(move |degree| {
                let spec = projection.clone().unwrap_or(RuleSpec::GaussLegendre {
                    n: (degree + 2).max(10),
                });
                let rule = spec.on_box(&lower, &upper)?;
                let s = build_pce(&m, degree, truncation, &rule, &lower, &upper)?;
                Ok((Box::new(s) as Box<dyn ObservationMap>, degree as f64))
            }),
            SurrogateSpec::ScalarPerturbation => {
                let ModelKind::ScalarLinear { a } = self.model else {
                    return Err(Error::Config("scalar_perturbation needs the scalar_linear model".into()));
                };
                Box::new(move |n| {
                    let s = ForwardModel::scalar_linear(a + 1.0 / n as f64);
                    Ok((Box::new(s) as Box<dyn ObservationMap>, n as f64))
                })
            }
        };
        Ok(StudySetup {
            study: self.study.name().to_string(),
            model: Box::new(model),
            ladder: self.ladder.clone(),
            factory,
            grid,
            rules,
            l2_rule,
            noise,
            checks: self.checks.clone(),
            fidelity,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_example1_defaults() {
        let cfg = parse_config("study = \"example1_scalar\"").unwrap().resolve().unwrap();
        assert_eq!(cfg.model, ModelKind::ScalarLinear { a: 1.0 });
        let a_n: Vec<f64> = cfg.ladder.iter().map(|n| 1.0 + 1.0 / *n as f64).collect();
        assert_eq!(a_n, vec![1.5, 1.25, 1.125, 1.0625]);
    }

    #[test]
    fn rejects_decreasing_ladder() {
        let err = parse_config("study = \"analytic_plx\"\nladder = [8, 4]").unwrap_err();
        assert!(err.to_string().contains("ladder not increasing"));
        assert!(parse_config("study = \"analytic_plx\"\nladder = []").is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(parse_config("study = \"analytic_plx\"\nthreds = 2").is_err());
        assert!(parse_config("study = \"analytic_plx\"\n[noise]\nvariance = 1e-4\nvar = 1").is_err());
        assert!(parse_config("study = \"heat_pce\"\n[heat]\ndtt = 0.1").is_err());
    }

    #[test]
    fn custom_requires_sections() {
        let err = parse_config("study = \"custom\"").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("custom study needs"));
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let text = "study = \"analytic_plx\"\n[design_grid]\nlower = [0.0]\nupper = [1.0]\nn_per_axis = 3";
        assert!(parse_config(text).unwrap().resolve().is_err());
        let text = "study = \"analytic_plx\"\n[noise]\ncov = [[1.0]]";
        assert!(parse_config(text).unwrap().resolve().is_err());
        let text = "study = \"analytic_plx\"\n[prior]\nkind = \"uniform_box\"\nlower = [0.0, 0.0]\nupper = [1.0, 1.0]";
        assert!(parse_config(text).unwrap().resolve().is_err());
    }

    #[test]
    fn overrides_merge_with_preset() {
        let text = r#"
study = "analytic_plx"
ladder = [4, 8, 16]
threads = 2
[quadrature]
noise = { kind = "smolyak_gauss_hermite", level = 2 }
"#;
        let cfg = parse_config(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.ladder, vec![4, 8, 16]);
        assert_eq!(cfg.threads, 2);
        assert_eq!(cfg.quadrature.prior, RuleSpec::Trapezoid { n: 201 });
        assert_eq!(cfg.quadrature.noise, RuleSpec::SmolyakGaussHermite { level: 2 });
    }

    #[test]
    fn heat_section_reaches_the_model() {
        let cfg = parse_config("study = \"heat_pce\"\n[heat]\nspatial_n = 21")
            .unwrap()
            .resolve()
            .unwrap();
        let ModelKind::HeatSensor(h) = cfg.model else { panic!() };
        assert_eq!(h.spatial_n, 21);
        assert_eq!(h.bdf_order, 4);
    }

    #[test]
    fn resolved_config_round_trips() {
        for study in StudyKind::PRESETS {
            for scale in [Scale::Desk, Scale::Paper] {
                let cfg = preset(study, scale).unwrap();
                cfg.validate().unwrap();
                let text = cfg.to_toml().unwrap();
                let back: ResolvedConfig = toml::from_str(&text).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn rule_specs_build() {
        let r = RuleSpec::SmolyakGaussHermite { level: 3 }.standard_normal(2).unwrap();
        assert_eq!(r.len(), 45);
        let r = RuleSpec::Trapezoid { n: 5 }.on_prior(&PriorSpec::uniform_box(vec![0.0], vec![1.0])).unwrap();
        assert_eq!(r.len(), 5);
        let r = RuleSpec::GaussHermite { n: 4 }.on_prior(&PriorSpec::standard_normal(2)).unwrap();
        assert_eq!(r.len(), 16);
        assert!(RuleSpec::GaussHermite { n: 4 }.on_box(&[0.0], &[1.0]).is_err());
        assert!(RuleSpec::SmolyakClenshawCurtis { level: 2 }.on_box(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }
}
