//! Synthetic repeated-measures data with planted distributional effects.
//!
//! Every scenario draws subject-level distribution parameters from declared
//! laws, samples raw observations from those distributions, and generates
//! outcomes from the subject's TRUE population quantile function rather than
//! from the sampled data, so estimators can be scored against exact targets.
//! A ground-truth record carries everything planted: drawn parameters, the
//! pre-noise linear predictor, and any latent factor scores.
//!
//! Randomness is counter-based: each (purpose, subject, feature) triple keys
//! its own stream derived from the master seed, so generation is reproducible
//! across platforms and parallel schedules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, Continuous, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lmoments::lmoments_from_quantile;
use crate::quantiles::{QuantileFunction, QuantileGrid, RepeatedMeasuresDataset, SubjectRecord};
use crate::util::{derive_rng, open_unit, std_normal_icdf};

/// Resolution of the quadrature grid used for population quantities.
pub const POPULATION_GRID_POINTS: usize = 4096;

/// Midpoint grid fine enough that quadrature error is negligible next to
/// the tolerances any planted-effect comparison uses.
pub fn population_grid() -> QuantileGrid {
    QuantileGrid::midpoint(POPULATION_GRID_POINTS).expect("population grid size is valid")
}

/// Law for one subject-level distribution parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamLaw {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl ParamLaw {
    fn validate(&self, name: &str, require_positive: bool) -> Result<()> {
        let (lo, hi) = match *self {
            ParamLaw::Fixed(v) => (v, v),
            ParamLaw::Uniform { lo, hi } => (lo, hi),
        };
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "law for {name} must span a finite interval, got [{lo}, {hi}]"
            )));
        }
        if require_positive && lo <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "law for {name} must be strictly positive, got lower bound {lo}"
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ParamLaw::Fixed(v) => v,
            ParamLaw::Uniform { lo, hi } => lo + (hi - lo) * open_unit(rng),
        }
    }
}

/// Family of subject-level distributions, with one law per parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectFamily {
    Gaussian { mean: ParamLaw, sd: ParamLaw },
    Exponential { rate: ParamLaw },
    Uniform { lo: ParamLaw, width: ParamLaw },
    Beta { alpha: ParamLaw, beta: ParamLaw },
}

impl SubjectFamily {
    fn validate(&self) -> Result<()> {
        match self {
            SubjectFamily::Gaussian { mean, sd } => {
                mean.validate("gaussian mean", false)?;
                sd.validate("gaussian sd", true)
            }
            SubjectFamily::Exponential { rate } => rate.validate("exponential rate", true),
            SubjectFamily::Uniform { lo, width } => {
                lo.validate("uniform lower bound", false)?;
                width.validate("uniform width", true)
            }
            SubjectFamily::Beta { alpha, beta } => {
                alpha.validate("beta shape alpha", true)?;
                beta.validate("beta shape beta", true)
            }
        }
    }

    fn draw_params(&self, rng: &mut ChaCha8Rng) -> SubjectParams {
        match self {
            SubjectFamily::Gaussian { mean, sd } => {
                SubjectParams::Gaussian { mean: mean.draw(rng), sd: sd.draw(rng) }
            }
            SubjectFamily::Exponential { rate } => {
                SubjectParams::Exponential { rate: rate.draw(rng) }
            }
            SubjectFamily::Uniform { lo, width } => {
                let lo = lo.draw(rng);
                SubjectParams::Uniform { lo, hi: lo + width.draw(rng) }
            }
            SubjectFamily::Beta { alpha, beta } => {
                SubjectParams::Beta { alpha: alpha.draw(rng), beta: beta.draw(rng) }
            }
        }
    }
}

/// Parameters drawn for one subject and feature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectParams {
    Gaussian { mean: f64, sd: f64 },
    Exponential { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl SubjectParams {
    /// Population quantile at level p in (0, 1).
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            SubjectParams::Gaussian { mean, sd } => mean + sd * std_normal_icdf(p),
            SubjectParams::Exponential { rate } => -(1.0 - p).ln() / rate,
            SubjectParams::Uniform { lo, hi } => lo + (hi - lo) * p,
            SubjectParams::Beta { alpha, beta } => beta_quantile(alpha, beta, p),
        }
    }
}

// The stock beta inverse is a coarse bisection (errors near 1e-5), too loose
// for population oracles; refine it with bracket-safeguarded Newton steps on
// the regularized incomplete beta.
fn beta_quantile(alpha: f64, beta: f64, p: f64) -> f64 {
    let dist = BetaDist::new(alpha, beta).expect("beta parameters validated at scenario check");
    let mut x = dist.inverse_cdf(p).clamp(1e-12, 1.0 - 1e-12);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..60 {
        let f = dist.cdf(x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = dist.pdf(x);
        let next = if d > 0.0 { x - f / d } else { f64::NAN };
        let next = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-3) {
            return next;
        }
        x = next;
    }
    x
}

/// One subject-and-feature distribution: family parameters plus an additive
/// location shift (used by the latent-factor mechanism; zero otherwise).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubjectDistribution {
    pub params: SubjectParams,
    pub shift: f64,
}

impl SubjectDistribution {
    pub fn quantile(&self, p: f64) -> f64 {
        self.params.quantile(p) + self.shift
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.quantile(open_unit(rng))
    }

    /// Population quantile function sampled on the given grid.
    pub fn quantile_function(&self, grid: &QuantileGrid) -> QuantileFunction {
        let values = grid.levels().iter().map(|&p| self.quantile(p)).collect();
        QuantileFunction::new(grid.clone(), values)
            .expect("population quantiles are finite and nondecreasing")
    }
}

/// Shape of a planted functional coefficient over the probability axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaCurve {
    Constant { value: f64 },
    /// One full sine cycle: amplitude * sin(2 pi p).
    SineOneCycle { amplitude: f64 },
    /// Smoothly ramps over the top 30% of levels:
    /// amplitude * clamp((p - 0.7) / 0.3, 0, 1)^2.
    UpperTail { amplitude: f64 },
}

impl BetaCurve {
    pub fn evaluate(&self, p: f64) -> f64 {
        match *self {
            BetaCurve::Constant { value } => value,
            BetaCurve::SineOneCycle { amplitude } => {
                amplitude * (2.0 * std::f64::consts::PI * p).sin()
            }
            BetaCurve::UpperTail { amplitude } => {
                let t = ((p - 0.7) / 0.3).clamp(0.0, 1.0);
                amplitude * t * t
            }
        }
    }
}

/// How outcomes are built from each subject's population distribution.
/// Mechanisms that reference a single distribution use the scenario's FIRST
/// feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// eta = intercept + slope * population mean.
    ConstantCoefficient { intercept: f64, slope: f64 },
    /// eta = intercept + integral of beta(p) Q(p) dp.
    CoefficientCurve { intercept: f64, curve: BetaCurve },
    /// eta = intercept + sum of weight_k * population L_k.
    LMomentLinear { intercept: f64, weights: Vec<f64> },
    /// eta = intercept + integral of (linear Q + quadratic Q^2) dp.
    QuadraticSurface { intercept: f64, linear: f64, quadratic: f64 },
    /// Shared subject factor shifts every feature's location; one extra
    /// factor per domain shifts that domain's features only. The outcome
    /// follows the shared factor: eta = intercept + joint factor.
    LatentFactors { intercept: f64, joint_scale: f64, individual_scale: f64 },
}

/// Outcome distribution around the linear predictor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLaw {
    Gaussian { noise_sd: f64 },
    /// Bernoulli with success probability logistic(eta).
    Binomial,
}

/// One simulated feature: its name, block assignment, and subject family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub domain: String,
    pub family: SubjectFamily,
}

/// Full description of a synthetic scenario; the seed determines everything.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_subjects: usize,
    /// Inclusive range of per-subject observation counts (shared by all
    /// features of a subject).
    pub obs_range: (usize, usize),
    pub features: Vec<FeatureSpec>,
    pub mechanism: Mechanism,
    pub outcome: OutcomeLaw,
    pub seed: u64,
}

impl ScenarioSpec {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidArgument("scenario needs at least one subject".into()));
        }
        let (lo, hi) = self.obs_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "observation count range [{lo}, {hi}] is invalid"
            )));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidArgument("scenario needs at least one feature".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for feature in &self.features {
            if !seen.insert(feature.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate feature name {}",
                    feature.name
                )));
            }
            feature.family.validate()?;
        }
        match &self.mechanism {
            Mechanism::LMomentLinear { weights, .. } if weights.is_empty() => {
                return Err(Error::InvalidArgument(
                    "L-moment mechanism needs at least one weight".into(),
                ));
            }
            _ => {}
        }
        if let OutcomeLaw::Gaussian { noise_sd } = self.outcome {
            if !(noise_sd >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "outcome noise sd must be nonnegative, got {noise_sd}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything planted by a scenario, sufficient to score any estimator
/// without re-deriving targets from the sampled data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub mechanism: Mechanism,
    pub outcome: OutcomeLaw,
    pub subject_ids: Vec<String>,
    /// Per subject: feature name -> drawn distribution.
    pub distributions: Vec<BTreeMap<String, SubjectDistribution>>,
    /// Per subject: feature name -> first four population L-moments.
    pub population_lmoments: Vec<BTreeMap<String, Vec<f64>>>,
    /// Pre-noise linear predictor per subject.
    pub linear_predictor: Vec<f64>,
    /// Shared factor scores (latent-factor mechanism only).
    pub joint_scores: Option<Vec<f64>>,
    /// Per-domain factor scores (latent-factor mechanism only).
    pub individual_scores: Option<BTreeMap<String, Vec<f64>>>,
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

// Stream tags: [1, subject] parameters and counts, [2, subject, feature]
// observation draws, [3, subject] outcome noise.
const TAG_PARAMS: u64 = 1;
const TAG_OBSERVATIONS: u64 = 2;
const TAG_OUTCOME: u64 = 3;

/// Generate a dataset and its ground truth from a scenario description.
pub fn generate(spec: &ScenarioSpec) -> Result<(RepeatedMeasuresDataset, GroundTruth)> {
    spec.validate()?;
    let grid = population_grid();
    let latent = matches!(spec.mechanism, Mechanism::LatentFactors { .. });

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut subject_ids = Vec::with_capacity(spec.n_subjects);
    let mut distributions = Vec::with_capacity(spec.n_subjects);
    let mut population_lmoments = Vec::with_capacity(spec.n_subjects);
    let mut linear_predictor = Vec::with_capacity(spec.n_subjects);
    let mut joint_scores = Vec::new();
    let mut individual_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for i in 0..spec.n_subjects {
        let mut param_rng = derive_rng(spec.seed, &[TAG_PARAMS, i as u64]);
        let (lo, hi) = spec.obs_range;
        let count = param_rng.gen_range(lo..=hi);

        let joint = if latent { std_normal_icdf(open_unit(&mut param_rng)) } else { 0.0 };
        if latent {
            joint_scores.push(joint);
        }
        let mut domain_factor: BTreeMap<&str, f64> = BTreeMap::new();

        let mut dists: BTreeMap<String, SubjectDistribution> = BTreeMap::new();
        for feature in &spec.features {
            let params = feature.family.draw_params(&mut param_rng);
            let shift = if let Mechanism::LatentFactors {
                joint_scale, individual_scale, ..
            } = spec.mechanism
            {
                let own = *domain_factor
                    .entry(feature.domain.as_str())
                    .or_insert_with(|| std_normal_icdf(open_unit(&mut param_rng)));
                joint_scale * joint + individual_scale * own
            } else {
                0.0
            };
            dists.insert(feature.name.clone(), SubjectDistribution { params, shift });
        }
        if latent {
            for (domain, &score) in &domain_factor {
                individual_scores.entry(domain.to_string()).or_default().push(score);
            }
        }

        // Raw observations: inverse-transform draws from each feature's own
        // stream, so adding features never perturbs existing ones.
        let mut observations: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (f, feature) in spec.features.iter().enumerate() {
            let mut obs_rng = derive_rng(spec.seed, &[TAG_OBSERVATIONS, i as u64, f as u64]);
            let dist = &dists[&feature.name];
            observations
                .insert(feature.name.clone(), (0..count).map(|_| dist.draw(&mut obs_rng)).collect());
        }

        // Population L-moments per feature, from the true quantile function.
        let mut lmoms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for feature in &spec.features {
            let qf = dists[&feature.name].quantile_function(&grid);
            lmoms.insert(feature.name.clone(), lmoments_from_quantile(&qf, 4)?.values().to_vec());
        }

        let eta = linear_predictor_for(spec, &grid, &dists, joint)?;
        linear_predictor.push(eta);

        let mut outcome_rng = derive_rng(spec.seed, &[TAG_OUTCOME, i as u64]);
        let outcome = match spec.outcome {
            OutcomeLaw::Gaussian { noise_sd } => {
                eta + noise_sd * std_normal_icdf(open_unit(&mut outcome_rng))
            }
            OutcomeLaw::Binomial => {
                if open_unit(&mut outcome_rng) < logistic(eta) {
                    1.0
                } else {
                    0.0
                }
            }
        };

        let subject_id = format!("s{i:04}");
        subject_ids.push(subject_id.clone());
        subjects.push(SubjectRecord {
            subject_id,
            outcome,
            covariates: vec![],
            observations,
        });
        distributions.push(dists);
        population_lmoments.push(lmoms);
    }

    let domains: BTreeMap<String, String> =
        spec.features.iter().map(|f| (f.name.clone(), f.domain.clone())).collect();
    let dataset = RepeatedMeasuresDataset { subjects, covariate_names: vec![], domains };
    let truth = GroundTruth {
        seed: spec.seed,
        mechanism: spec.mechanism.clone(),
        outcome: spec.outcome,
        subject_ids,
        distributions,
        population_lmoments,
        linear_predictor,
        joint_scores: latent.then_some(joint_scores),
        individual_scores: latent.then_some(individual_scores),
    };
    Ok((dataset, truth))
}

fn linear_predictor_for(
    spec: &ScenarioSpec,
    grid: &QuantileGrid,
    dists: &BTreeMap<String, SubjectDistribution>,
    joint: f64,
) -> Result<f64> {
    let target = &dists[&spec.features[0].name];
    match &spec.mechanism {
        Mechanism::ConstantCoefficient { intercept, slope } => {
            let values: Vec<f64> = grid.levels().iter().map(|&p| target.quantile(p)).collect();
            Ok(intercept + slope * grid.integrate(&values)?)
        }
        Mechanism::CoefficientCurve { intercept, curve } => {
            let integrand: Vec<f64> = grid
                .levels()
                .iter()
                .map(|&p| curve.evaluate(p) * target.quantile(p))
                .collect();
            Ok(intercept + grid.integrate(&integrand)?)
        }
        Mechanism::LMomentLinear { intercept, weights } => {
            let qf = target.quantile_function(grid);
            let lm = lmoments_from_quantile(&qf, weights.len())?;
            let mut eta = *intercept;
            for (k, w) in weights.iter().enumerate() {
                eta += w * lm.get(k + 1);
            }
            Ok(eta)
        }
        Mechanism::QuadraticSurface { intercept, linear, quadratic } => {
            let integrand: Vec<f64> = grid
                .levels()
                .iter()
                .map(|&p| {
                    let q = target.quantile(p);
                    linear * q + quadratic * q * q
                })
                .collect();
            Ok(intercept + grid.integrate(&integrand)?)
        }
        Mechanism::LatentFactors { intercept, .. } => Ok(intercept + joint),
    }
}
