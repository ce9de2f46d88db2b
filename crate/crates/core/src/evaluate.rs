//! Repeated k-fold cross-validation for distributional regression models.
//!
//! The harness is built around two traits: a [`ModelRecipe`] knows how to fit
//! a model from scratch on any dataset, and the [`FittedModel`] it produces
//! predicts new subjects using only state frozen at fit time. Because every
//! recipe rebuilds its data-dependent preprocessing (quantile grids,
//! L-moments, bin edges, basis domains, column centerings) inside each
//! training fold, test subjects never influence training-fold parameters.
//! Metrics are computed per repeat from pooled test-fold predictions, then
//! averaged across repeats.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jive::midranks;
use crate::pglm::Family;
use crate::quantiles::{QuantileGrid, RepeatedMeasuresDataset};
use crate::soqfr::{
    fit_fgam_qf, fit_gam_lmoments, fit_histogram_glm, fit_soqfr, fit_soqfr_l, FgamFit,
    FgamOptions, GamLFit, GamLOptions, HistFit, HistOptions, SoqfrFit, SoqfrLFit, SoqfrOptions,
};
use crate::util::derive_rng;

/// Area under the ROC curve via the Mann-Whitney statistic with midrank tie
/// handling: P(score+ > score-) + 0.5 P(tie) over all positive-negative pairs.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), found: scores.len() });
    }
    let bad: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite { context: "auc scores".into(), indices: bad });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::NotBinary);
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Layout of a repeated k-fold cross-validation run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CvPlan {
    /// Number of folds per repeat; each subject lands in exactly one test fold.
    pub k: usize,
    /// Number of independent repeats (each with its own fold shuffle).
    pub repeats: usize,
    /// Master seed; every repeat derives its own stream from it.
    pub seed: u64,
    /// Stratify fold assignment by class when the outcome is binary.
    pub stratified: bool,
}

impl CvPlan {
    pub fn new(k: usize, repeats: usize, seed: u64) -> Self {
        CvPlan { k, repeats, seed, stratified: true }
    }
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan::new(10, 100, 0)
    }
}

/// Fold id per subject for one repeat. Unstratified assignment shuffles the
/// subject order and deals folds round-robin; when stratification applies
/// (flag set, outcomes binary with both classes) each class is shuffled and
/// dealt separately from a random starting fold, so per-class fold counts
/// differ by at most one. Assignment depends on outcome VALUES only through
/// class membership, never through their magnitudes.
pub fn fold_assignments(plan: &CvPlan, outcomes: &[f64], repeat: usize) -> Result<Vec<usize>> {
    let n = outcomes.len();
    validate_plan_shape(plan, n)?;
    let mut rng = derive_rng(plan.seed, &[repeat as u64]);
    let binary = !outcomes.is_empty()
        && outcomes.iter().all(|&y| y == 0.0 || y == 1.0)
        && outcomes.iter().any(|&y| y == 0.0)
        && outcomes.iter().any(|&y| y == 1.0);
    let mut assignment = vec![0usize; n];
    if plan.stratified && binary {
        for class in [0.0, 1.0] {
            let mut members: Vec<usize> =
                (0..n).filter(|&i| outcomes[i] == class).collect();
            members.shuffle(&mut rng);
            let start = rng.gen_range(0..plan.k);
            for (j, &idx) in members.iter().enumerate() {
                assignment[idx] = (start + j) % plan.k;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (j, &idx) in order.iter().enumerate() {
            assignment[idx] = j % plan.k;
        }
    }
    Ok(assignment)
}

fn validate_plan_shape(plan: &CvPlan, n: usize) -> Result<()> {
    if plan.k < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 2 folds, got {}",
            plan.k
        )));
    }
    if plan.k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} subjects into {} folds",
            plan.k
        )));
    }
    if plan.repeats == 0 {
        return Err(Error::InvalidArgument("cross-validation needs at least 1 repeat".into()));
    }
    Ok(())
}

/// One test-fold prediction together with the mean outcome of the training
/// fold that produced it, so downstream metrics never touch test information.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub predicted: f64,
    pub observed: f64,
    /// Mean outcome of the training fold behind this prediction.
    pub baseline: f64,
}

/// Cross-validated R²: 1 - SSE/SST where SST is centered at each prediction's
/// own training-fold mean rather than the test mean.
pub fn cv_r2(predictions: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("cv_r2 needs at least one prediction".into()));
    }
    let sse: f64 = predictions.iter().map(|p| (p.observed - p.predicted).powi(2)).sum();
    let sst: f64 = predictions.iter().map(|p| (p.observed - p.baseline).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(Error::InvalidArgument(
            "outcomes have zero variance around the training-fold means".into(),
        ));
    }
    Ok(1.0 - sse / sst)
}

/// Which summary a report's values measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    CvAuc,
    CvR2,
    DevianceExplained,
}

impl MetricKind {
    pub fn label(&self) -> &'static str {
        match self {
            MetricKind::CvAuc => "cvAUC",
            MetricKind::CvR2 => "cvR2",
            MetricKind::DevianceExplained => "deviance-explained",
        }
    }
}

/// Per-repeat metric values with their mean and standard deviation, plus the
/// bookkeeping needed to reproduce the run. Invalid repeats (more than 10% of
/// folds failed to fit) are excluded from `per_repeat`, `mean`, and `sd`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub metric: MetricKind,
    pub per_repeat: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    pub skipped_folds: usize,
    pub invalid_repeats: usize,
}

/// A model fitted on one training set; all preprocessing is frozen inside it.
pub trait FittedModel: Send {
    /// Response-scale predictions (probabilities for binomial fits) for new
    /// subjects, using only state learned at fit time.
    fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>>;
    /// Flat coefficient vector; instrumentation hook for leakage checks.
    fn parameters(&self) -> &[f64];
    /// In-sample deviance explained of the underlying fit.
    fn deviance_explained(&self) -> Result<f64>;
}

/// A model family that can be refit from scratch on any training dataset.
pub trait ModelRecipe: Sync {
    /// Short identifier used in report tables.
    fn name(&self) -> &str;
    fn family(&self) -> Family;
    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>>;
}

macro_rules! impl_fitted_model {
    ($fit_ty:ty) => {
        impl FittedModel for $fit_ty {
            fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
                <$fit_ty>::predict(self, dataset)
            }

            fn parameters(&self) -> &[f64] {
                &self.fit.coefficients
            }

            fn deviance_explained(&self) -> Result<f64> {
                self.fit.deviance_explained()
            }
        }
    };
}

impl_fitted_model!(SoqfrFit);
impl_fitted_model!(SoqfrLFit);
impl_fitted_model!(FgamFit);
impl_fitted_model!(GamLFit);
impl_fitted_model!(HistFit);

/// Scalar-on-quantile-function regression with a functional coefficient.
#[derive(Debug, Clone)]
pub struct SoqfrRecipe {
    pub feature: String,
    pub covariates: Vec<String>,
    pub family: Family,
    pub options: SoqfrOptions,
}

impl ModelRecipe for SoqfrRecipe {
    fn name(&self) -> &str {
        "soqfr"
    }

    fn family(&self) -> Family {
        self.family
    }

    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
        fit_soqfr(dataset, &self.feature, &self.covariates, self.family, &self.options)
            .map(|f| Box::new(f) as Box<dyn FittedModel>)
    }
}

/// Unpenalized regression on the leading L-moments.
#[derive(Debug, Clone)]
pub struct SoqfrLRecipe {
    pub feature: String,
    pub covariates: Vec<String>,
    pub family: Family,
    pub order: usize,
    pub grid: QuantileGrid,
}

impl ModelRecipe for SoqfrLRecipe {
    fn name(&self) -> &str {
        "soqfr-l"
    }

    fn family(&self) -> Family {
        self.family
    }

    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
        fit_soqfr_l(dataset, &self.feature, &self.covariates, self.family, self.order, &self.grid)
            .map(|f| Box::new(f) as Box<dyn FittedModel>)
    }
}

/// Bivariate-surface regression on the quantile function.
#[derive(Debug, Clone)]
pub struct FgamRecipe {
    pub feature: String,
    pub covariates: Vec<String>,
    pub family: Family,
    pub options: FgamOptions,
}

impl ModelRecipe for FgamRecipe {
    fn name(&self) -> &str {
        "fgam"
    }

    fn family(&self) -> Family {
        self.family
    }

    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
        fit_fgam_qf(dataset, &self.feature, &self.covariates, self.family, &self.options)
            .map(|f| Box::new(f) as Box<dyn FittedModel>)
    }
}

/// Additive model with one smooth per L-moment.
#[derive(Debug, Clone)]
pub struct GamLRecipe {
    pub feature: String,
    pub covariates: Vec<String>,
    pub family: Family,
    pub options: GamLOptions,
}

impl ModelRecipe for GamLRecipe {
    fn name(&self) -> &str {
        "gam-l"
    }

    fn family(&self) -> Family {
        self.family
    }

    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
        fit_gam_lmoments(dataset, &self.feature, &self.covariates, self.family, &self.options)
            .map(|f| Box::new(f) as Box<dyn FittedModel>)
    }
}

/// Histogram-composition regression with a smooth bin-effect curve.
#[derive(Debug, Clone)]
pub struct HistRecipe {
    pub feature: String,
    pub covariates: Vec<String>,
    pub family: Family,
    pub options: HistOptions,
}

impl ModelRecipe for HistRecipe {
    fn name(&self) -> &str {
        "hist"
    }

    fn family(&self) -> Family {
        self.family
    }

    fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
        fit_histogram_glm(dataset, &self.feature, &self.covariates, self.family, &self.options)
            .map(|f| Box::new(f) as Box<dyn FittedModel>)
    }
}

struct RepeatOutcome {
    metric: Option<f64>,
    skipped: usize,
}

/// Repeated k-fold cross-validation of a model recipe. The metric follows the
/// recipe's family: cvAUC for binomial fits, cv-R² for gaussian fits. Every
/// training fold refits the recipe from scratch; test-fold predictions are
/// pooled per repeat, the metric computed once per repeat, and mean and
/// standard deviation taken across repeats. A fold whose fit fails is skipped
/// and counted; a repeat with more than 10% failed folds is dropped as
/// invalid. Results are bit-identical for identical inputs and seed.
pub fn cross_validate<R>(
    recipe: &R,
    dataset: &RepeatedMeasuresDataset,
    plan: &CvPlan,
) -> Result<MetricReport>
where
    R: ModelRecipe + ?Sized,
{
    cross_validate_with_hook(recipe, dataset, plan, None)
}

/// [`cross_validate`] with an instrumentation hook that receives
/// `(repeat, fold, parameters)` for every successfully fitted training fold.
/// The hook runs on worker threads and must be thread-safe; calls arrive in
/// no particular order but are uniquely keyed by (repeat, fold).
pub fn cross_validate_with_hook<R>(
    recipe: &R,
    dataset: &RepeatedMeasuresDataset,
    plan: &CvPlan,
    hook: Option<&(dyn Fn(usize, usize, &[f64]) + Sync)>,
) -> Result<MetricReport>
where
    R: ModelRecipe + ?Sized,
{
    let n = dataset.n_subjects();
    validate_plan_shape(plan, n)?;
    let outcomes = dataset.outcomes();
    let metric = match recipe.family() {
        Family::Binomial => {
            if outcomes.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::NotBinary);
            }
            let n_pos = outcomes.iter().filter(|&&y| y == 1.0).count();
            if n_pos == 0 || n_pos == n {
                return Err(Error::SingleClass);
            }
            MetricKind::CvAuc
        }
        Family::Gaussian => MetricKind::CvR2,
    };

    let outcomes = &outcomes;
    let results: Vec<RepeatOutcome> = (0..plan.repeats)
        .into_par_iter()
        .map(|repeat| run_repeat(recipe, dataset, plan, outcomes, metric, repeat, hook))
        .collect::<Result<Vec<_>>>()?;

    let skipped_folds: usize = results.iter().map(|r| r.skipped).sum();
    let per_repeat: Vec<f64> = results.iter().filter_map(|r| r.metric).collect();
    let invalid_repeats = plan.repeats - per_repeat.len();
    if per_repeat.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all {} cross-validation repeats were invalid ({} folds failed)",
            plan.repeats, skipped_folds
        )));
    }
    let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    let sd = if per_repeat.len() < 2 {
        0.0
    } else {
        let ss: f64 = per_repeat.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (per_repeat.len() - 1) as f64).sqrt()
    };
    Ok(MetricReport {
        model: recipe.name().to_string(),
        metric,
        per_repeat,
        mean,
        sd,
        k: plan.k,
        repeats: plan.repeats,
        seed: plan.seed,
        skipped_folds,
        invalid_repeats,
    })
}

fn run_repeat<R>(
    recipe: &R,
    dataset: &RepeatedMeasuresDataset,
    plan: &CvPlan,
    outcomes: &[f64],
    metric: MetricKind,
    repeat: usize,
    hook: Option<&(dyn Fn(usize, usize, &[f64]) + Sync)>,
) -> Result<RepeatOutcome>
where
    R: ModelRecipe + ?Sized,
{
    let assignment = fold_assignments(plan, outcomes, repeat)?;
    let binomial = metric == MetricKind::CvAuc;
    let mut pool: Vec<Prediction> = Vec::with_capacity(outcomes.len());
    let mut skipped = 0usize;
    for fold in 0..plan.k {
        let test_idx: Vec<usize> =
            (0..outcomes.len()).filter(|&i| assignment[i] == fold).collect();
        let train_idx: Vec<usize> =
            (0..outcomes.len()).filter(|&i| assignment[i] != fold).collect();
        if test_idx.is_empty() {
            continue;
        }
        if binomial {
            let has_pos = train_idx.iter().any(|&i| outcomes[i] == 1.0);
            let has_neg = train_idx.iter().any(|&i| outcomes[i] == 0.0);
            if !has_pos || !has_neg {
                return Err(Error::InvalidArgument(format!(
                    "training fold {fold} in repeat {repeat} contains a single outcome class"
                )));
            }
        }
        let train = dataset.subset(&train_idx);
        let model = match recipe.fit(&train) {
            Ok(m) => m,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if let Some(h) = hook {
            h(repeat, fold, model.parameters());
        }
        let test = dataset.subset(&test_idx);
        let predicted = model.predict(&test)?;
        let baseline =
            train_idx.iter().map(|&i| outcomes[i]).sum::<f64>() / train_idx.len() as f64;
        for (j, &i) in test_idx.iter().enumerate() {
            pool.push(Prediction { predicted: predicted[j], observed: outcomes[i], baseline });
        }
    }
    // A repeat keeps its metric only when at most 10% of its folds failed.
    if skipped * 10 > plan.k {
        return Ok(RepeatOutcome { metric: None, skipped });
    }
    let value = match metric {
        MetricKind::CvAuc => {
            let scores: Vec<f64> = pool.iter().map(|p| p.predicted).collect();
            let labels: Vec<f64> = pool.iter().map(|p| p.observed).collect();
            auc(&scores, &labels)?
        }
        MetricKind::CvR2 => cv_r2(&pool)?,
        MetricKind::DevianceExplained => unreachable!("not a cross-validated metric"),
    };
    Ok(RepeatOutcome { metric: Some(value), skipped })
}

/// Full-data deviance explained for a recipe, packaged as a one-value report
/// so model-comparison tables can mix it with cross-validated metrics.
pub fn deviance_explained_report(
    recipe: &dyn ModelRecipe,
    dataset: &RepeatedMeasuresDataset,
) -> Result<MetricReport> {
    let model = recipe.fit(dataset)?;
    let de = model.deviance_explained()?;
    Ok(MetricReport {
        model: recipe.name().to_string(),
        metric: MetricKind::DevianceExplained,
        per_repeat: vec![de],
        mean: de,
        sd: 0.0,
        k: 1,
        repeats: 1,
        seed: 0,
        skipped_folds: 0,
        invalid_repeats: 0,
    })
}

/// Fold assignments for every repeat, keyed by (repeat, subject index).
/// Convenience for callers that audit the partition structure.
pub fn all_fold_assignments(
    plan: &CvPlan,
    outcomes: &[f64],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    (0..plan.repeats)
        .map(|r| fold_assignments(plan, outcomes, r).map(|a| (r, a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantiles::SubjectRecord;
    use crate::util::{open_unit, std_normal_icdf};
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::sync::Mutex;

    const FEATURE: &str = "speed";

    fn brute_force_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut gt = 0.0;
        let mut tie = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1.0 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0.0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    gt += 1.0;
                } else if scores[i] == scores[j] {
                    tie += 1.0;
                }
            }
        }
        (gt + 0.5 * tie) / pairs
    }

    fn build_dataset(
        observations: Vec<Vec<f64>>,
        outcomes: Vec<f64>,
    ) -> RepeatedMeasuresDataset {
        let subjects = observations
            .into_iter()
            .zip(outcomes)
            .enumerate()
            .map(|(i, (obs, y))| SubjectRecord {
                subject_id: format!("s{i:03}"),
                outcome: y,
                covariates: vec![],
                observations: BTreeMap::from([(FEATURE.to_string(), obs)]),
            })
            .collect();
        RepeatedMeasuresDataset {
            subjects,
            covariate_names: vec![],
            domains: BTreeMap::new(),
        }
    }

    // Location-family samples: subject i draws m observations from
    // Normal(mu_i, 1) with mu_i uniform on (-3, 3).
    fn location_samples(seed: u64, n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut obs = Vec::with_capacity(n);
        let mut mus = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = derive_rng(seed, &[40, i as u64]);
            let mu = 6.0 * open_unit(&mut rng) - 3.0;
            mus.push(mu);
            obs.push((0..m).map(|_| mu + std_normal_icdf(open_unit(&mut rng))).collect());
        }
        (obs, mus)
    }

    fn lmoment_recipe(family: Family) -> SoqfrLRecipe {
        SoqfrLRecipe {
            feature: FEATURE.to_string(),
            covariates: vec![],
            family,
            order: 2,
            grid: QuantileGrid::midpoint(100).unwrap(),
        }
    }

    #[test]
    fn auc_matches_hand_worked_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0.0, 0.0, 1.0, 1.0];
        // pairs: (0.35,0.1)+, (0.35,0.4)-, (0.8,0.1)+, (0.8,0.4)+ => 3/4
        let a = auc(&scores, &labels).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_separation_is_one_and_all_ties_is_half() {
        let labels = [0.0, 0.0, 1.0, 1.0, 1.0];
        let separated = [0.1, 0.2, 0.7, 0.8, 0.9];
        assert_eq!(auc(&separated, &labels).unwrap(), 1.0);
        let constant = [0.4; 5];
        assert_eq!(auc(&constant, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class_and_nonbinary_labels() {
        let scores = [0.1, 0.2, 0.3];
        assert!(matches!(auc(&scores, &[1.0, 1.0, 1.0]), Err(Error::SingleClass)));
        assert!(matches!(auc(&scores, &[0.0, 0.5, 1.0]), Err(Error::NotBinary)));
        assert!(matches!(
            auc(&[0.1, f64::NAN, 0.3], &[0.0, 1.0, 1.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    proptest! {
        // Lattice-valued scores force plenty of ties; the midrank formula
        // must agree with the O(n^2) pairwise probability everywhere.
        #[test]
        fn auc_equals_brute_force_pairwise(
            raw in prop::collection::vec((0u8..12, prop::bool::ANY), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 10.0).collect();
            let mut labels: Vec<f64> =
                raw.iter().map(|(_, b)| if *b { 1.0 } else { 0.0 }).collect();
            labels[0] = 0.0;
            let last = labels.len() - 1;
            labels[last] = 1.0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_r2_endpoints_behave_as_defined() {
        let perfect: Vec<Prediction> = (0..10)
            .map(|i| Prediction { predicted: i as f64, observed: i as f64, baseline: 4.5 })
            .collect();
        assert_eq!(cv_r2(&perfect).unwrap(), 1.0);

        // Predicting each training mean scores exactly zero.
        let mean_only: Vec<Prediction> = (0..10)
            .map(|i| Prediction { predicted: 4.5, observed: i as f64, baseline: 4.5 })
            .collect();
        assert_eq!(cv_r2(&mean_only).unwrap(), 0.0);

        // Anti-correlated predictions blow SSE past SST.
        let anti: Vec<Prediction> = (0..10)
            .map(|i| Prediction { predicted: 9.0 - i as f64, observed: i as f64, baseline: 4.5 })
            .collect();
        assert!(cv_r2(&anti).unwrap() < -1.0);

        let flat: Vec<Prediction> = (0..5)
            .map(|_| Prediction { predicted: 1.0, observed: 2.0, baseline: 2.0 })
            .collect();
        assert!(matches!(cv_r2(&flat), Err(Error::InvalidArgument(_))));
        assert!(matches!(cv_r2(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fold_assignments_partition_subjects_evenly() {
        let plan = CvPlan { k: 7, repeats: 4, seed: 5, stratified: false };
        let outcomes: Vec<f64> = (0..23).map(|i| i as f64).collect();
        for repeat in 0..plan.repeats {
            let assignment = fold_assignments(&plan, &outcomes, repeat).unwrap();
            assert_eq!(assignment.len(), 23);
            let mut counts = vec![0usize; plan.k];
            for &f in &assignment {
                assert!(f < plan.k);
                counts[f] += 1;
            }
            let lo = counts.iter().min().unwrap();
            let hi = counts.iter().max().unwrap();
            assert!(hi - lo <= 1, "fold sizes {counts:?} are not balanced");
        }
        // Same repeat twice gives the same assignment; different repeats differ.
        let a0 = fold_assignments(&plan, &outcomes, 0).unwrap();
        assert_eq!(a0, fold_assignments(&plan, &outcomes, 0).unwrap());
        assert_ne!(a0, fold_assignments(&plan, &outcomes, 1).unwrap());
    }

    #[test]
    fn stratified_folds_balance_each_class() {
        let plan = CvPlan { k: 5, repeats: 6, seed: 9, stratified: true };
        // 12 positives, 18 negatives.
        let outcomes: Vec<f64> =
            (0..30).map(|i| if i % 5 < 2 { 1.0 } else { 0.0 }).collect();
        for repeat in 0..plan.repeats {
            let assignment = fold_assignments(&plan, &outcomes, repeat).unwrap();
            for class in [0.0, 1.0] {
                let mut counts = vec![0usize; plan.k];
                for (i, &f) in assignment.iter().enumerate() {
                    if outcomes[i] == class {
                        counts[f] += 1;
                    }
                }
                let lo = counts.iter().min().unwrap();
                let hi = counts.iter().max().unwrap();
                assert!(hi - lo <= 1, "class {class} counts {counts:?} unbalanced");
            }
        }
    }

    #[test]
    fn plan_shape_violations_are_rejected() {
        let outcomes = vec![1.0; 5];
        let too_many = CvPlan { k: 6, repeats: 1, seed: 0, stratified: false };
        assert!(fold_assignments(&too_many, &outcomes, 0).is_err());
        let too_few = CvPlan { k: 1, repeats: 1, seed: 0, stratified: false };
        assert!(fold_assignments(&too_few, &outcomes, 0).is_err());
        let no_repeats = CvPlan { k: 2, repeats: 0, seed: 0, stratified: false };
        assert!(fold_assignments(&no_repeats, &outcomes, 0).is_err());
    }

    #[test]
    fn noiseless_linear_outcome_gives_near_perfect_cv_r2() {
        let (obs, _) = location_samples(21, 60, 80);
        // Outcome is exactly linear in the subject's own first L-moment
        // (its sample mean), so the L-moment model can recover it.
        let outcomes: Vec<f64> = obs
            .iter()
            .map(|o| 2.0 + 3.0 * o.iter().sum::<f64>() / o.len() as f64)
            .collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 5, repeats: 3, seed: 11, stratified: true };
        let report = cross_validate(&lmoment_recipe(Family::Gaussian), &dataset, &plan).unwrap();
        assert_eq!(report.metric, MetricKind::CvR2);
        assert_eq!(report.per_repeat.len(), 3);
        assert_eq!(report.invalid_repeats, 0);
        assert!(report.mean > 0.99, "cv-R² {} too low", report.mean);
    }

    #[test]
    fn permuted_binary_labels_score_near_chance() {
        // One permuted labeling carries an irreducible chance offset of
        // roughly 0.075 SD at this sample size, so the null's center is
        // estimated by averaging mean cvAUC over independent permutations.
        let n = 60;
        let (obs, _) = location_samples(33, n, 50);
        let recipe = lmoment_recipe(Family::Binomial);
        let mut means = Vec::new();
        for perm in 0..8u64 {
            let mut labels = vec![0.0; n];
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = derive_rng(77, &[50, perm]);
            order.shuffle(&mut rng);
            for &i in order.iter().take(n / 2) {
                labels[i] = 1.0;
            }
            let dataset = build_dataset(obs.clone(), labels);
            let plan = CvPlan { k: 10, repeats: 12, seed: 3 + perm, stratified: true };
            let report = cross_validate(&recipe, &dataset, &plan).unwrap();
            assert_eq!(report.metric, MetricKind::CvAuc);
            assert_eq!(report.per_repeat.len(), 12);
            assert!(report.per_repeat.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!(
                (report.mean - 0.5).abs() < 0.3,
                "permutation {perm} mean cvAUC {} implausibly far from chance",
                report.mean
            );
            means.push(report.mean);
        }
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        assert!(
            (grand - 0.5).abs() < 0.05,
            "null cvAUC {grand} outside 0.5 +/- 0.05 (per-permutation means {means:?})"
        );
    }

    #[test]
    fn leave_one_out_single_repeat_runs() {
        let (obs, _) = location_samples(55, 8, 40);
        let outcomes: Vec<f64> = obs
            .iter()
            .map(|o| 1.0 + 0.5 * o.iter().sum::<f64>() / o.len() as f64)
            .collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 8, repeats: 1, seed: 2, stratified: false };
        let report = cross_validate(&lmoment_recipe(Family::Gaussian), &dataset, &plan).unwrap();
        assert_eq!(report.per_repeat.len(), 1);
        assert_eq!(report.sd, 0.0);
        assert_eq!(report.k, 8);
    }

    #[test]
    fn reports_are_bit_identical_across_runs() {
        let (obs, _) = location_samples(60, 30, 50);
        let outcomes: Vec<f64> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| o.iter().sum::<f64>() / o.len() as f64 + (i % 3) as f64 * 0.1)
            .collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 6, repeats: 4, seed: 17, stratified: false };
        let recipe = lmoment_recipe(Family::Gaussian);
        let a = cross_validate(&recipe, &dataset, &plan).unwrap();
        let b = cross_validate(&recipe, &dataset, &plan).unwrap();
        assert_eq!(a.per_repeat, b.per_repeat);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.sd, b.sd);
    }

    #[test]
    fn single_positive_class_member_breaks_stratified_training_folds() {
        let (obs, _) = location_samples(70, 10, 30);
        let mut labels = vec![0.0; 10];
        labels[4] = 1.0;
        let dataset = build_dataset(obs, labels);
        let plan = CvPlan { k: 5, repeats: 2, seed: 1, stratified: true };
        let err = cross_validate(&lmoment_recipe(Family::Binomial), &dataset, &plan);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn binomial_recipe_rejects_nonbinary_outcomes() {
        let (obs, _) = location_samples(75, 12, 30);
        let outcomes: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 3, repeats: 1, seed: 0, stratified: true };
        let err = cross_validate(&lmoment_recipe(Family::Binomial), &dataset, &plan);
        assert!(matches!(err, Err(Error::NotBinary)));
    }

    // Test recipe whose failures are scripted by subject id, with a
    // training-mean predictor behind it.
    struct MeanRecipe {
        fail_when_training_contains: Option<String>,
        fail_when_test_contains: Option<String>,
    }

    struct MeanModel {
        parameters: Vec<f64>,
    }

    impl FittedModel for MeanModel {
        fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
            Ok(vec![self.parameters[0]; dataset.n_subjects()])
        }

        fn parameters(&self) -> &[f64] {
            &self.parameters
        }

        fn deviance_explained(&self) -> Result<f64> {
            Ok(0.0)
        }
    }

    impl ModelRecipe for MeanRecipe {
        fn name(&self) -> &str {
            "mean"
        }

        fn family(&self) -> Family {
            Family::Gaussian
        }

        fn fit(&self, dataset: &RepeatedMeasuresDataset) -> Result<Box<dyn FittedModel>> {
            let ids: Vec<&str> =
                dataset.subjects.iter().map(|s| s.subject_id.as_str()).collect();
            if let Some(id) = &self.fail_when_training_contains {
                if ids.contains(&id.as_str()) {
                    return Err(Error::SingularSystem);
                }
            }
            if let Some(id) = &self.fail_when_test_contains {
                if !ids.contains(&id.as_str()) {
                    return Err(Error::SingularSystem);
                }
            }
            let mean = dataset.outcomes().iter().sum::<f64>() / dataset.n_subjects() as f64;
            Ok(Box::new(MeanModel { parameters: vec![mean] }))
        }
    }

    #[test]
    fn failed_folds_are_skipped_and_counted_when_under_the_limit() {
        let (obs, _) = location_samples(80, 30, 20);
        let outcomes: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 10, repeats: 3, seed: 4, stratified: false };
        // Fails exactly when s000 sits in the test fold: one fold per repeat.
        let recipe = MeanRecipe {
            fail_when_training_contains: None,
            fail_when_test_contains: Some("s000".into()),
        };
        let report = cross_validate(&recipe, &dataset, &plan).unwrap();
        assert_eq!(report.skipped_folds, 3);
        assert_eq!(report.invalid_repeats, 0);
        assert_eq!(report.per_repeat.len(), 3);
    }

    #[test]
    fn repeats_with_too_many_failed_folds_are_invalid() {
        let (obs, _) = location_samples(85, 16, 20);
        let outcomes: Vec<f64> = (0..16).map(|i| (i % 5) as f64).collect();
        let dataset = build_dataset(obs, outcomes);
        let plan = CvPlan { k: 4, repeats: 2, seed: 4, stratified: false };
        // Fails whenever s000 is in training: 3 of 4 folds, over the 10% limit.
        let recipe = MeanRecipe {
            fail_when_training_contains: Some("s000".into()),
            fail_when_test_contains: None,
        };
        let err = cross_validate(&recipe, &dataset, &plan);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corrupting_test_outcomes_leaves_that_folds_training_fit_unchanged() {
        let (obs, _) = location_samples(90, 24, 50);
        let outcomes: Vec<f64> = obs
            .iter()
            .map(|o| 1.0 + 2.0 * o.iter().sum::<f64>() / o.len() as f64)
            .collect();
        let dataset = build_dataset(obs, outcomes.clone());
        let plan = CvPlan { k: 4, repeats: 1, seed: 13, stratified: false };
        let recipe = lmoment_recipe(Family::Gaussian);

        let collect_params = |ds: &RepeatedMeasuresDataset| {
            let store: Mutex<BTreeMap<(usize, usize), Vec<f64>>> = Mutex::new(BTreeMap::new());
            let hook = |repeat: usize, fold: usize, params: &[f64]| {
                store.lock().unwrap().insert((repeat, fold), params.to_vec());
            };
            cross_validate_with_hook(&recipe, ds, &plan, Some(&hook)).unwrap();
            store.into_inner().unwrap()
        };

        let clean = collect_params(&dataset);
        // Corrupt the outcomes of fold 0's test subjects only. Unstratified
        // fold assignment ignores outcome values, so the partition is stable.
        let assignment = fold_assignments(&plan, &outcomes, 0).unwrap();
        let mut corrupted = dataset.clone();
        for (i, subject) in corrupted.subjects.iter_mut().enumerate() {
            if assignment[i] == 0 {
                subject.outcome += 500.0;
            }
        }
        let dirty = collect_params(&corrupted);

        // Fold 0 trains without the corrupted subjects: bit-identical fit.
        assert_eq!(clean[&(0, 0)], dirty[&(0, 0)]);
        // Sanity: folds that train ON the corrupted subjects must move.
        assert_ne!(clean[&(0, 1)], dirty[&(0, 1)]);
    }

    #[test]
    fn every_bundled_recipe_refits_and_predicts_through_the_trait() {
        let (obs, _) = location_samples(95, 26, 60);
        let outcomes: Vec<f64> = obs
            .iter()
            .map(|o| o.iter().sum::<f64>() / o.len() as f64)
            .collect();
        let dataset = build_dataset(obs, outcomes);
        let grid = QuantileGrid::midpoint(50).unwrap();
        let recipes: Vec<Box<dyn ModelRecipe>> = vec![
            Box::new(SoqfrRecipe {
                feature: FEATURE.into(),
                covariates: vec![],
                family: Family::Gaussian,
                options: SoqfrOptions { grid: grid.clone(), ..SoqfrOptions::default() },
            }),
            Box::new(lmoment_recipe(Family::Gaussian)),
            Box::new(FgamRecipe {
                feature: FEATURE.into(),
                covariates: vec![],
                family: Family::Gaussian,
                options: FgamOptions { grid: grid.clone(), ..FgamOptions::default() },
            }),
            Box::new(GamLRecipe {
                feature: FEATURE.into(),
                covariates: vec![],
                family: Family::Gaussian,
                options: GamLOptions {
                    grid: grid.clone(),
                    order: 2,
                    ..GamLOptions::default()
                },
            }),
            Box::new(HistRecipe {
                feature: FEATURE.into(),
                covariates: vec![],
                family: Family::Gaussian,
                options: HistOptions::default(),
            }),
        ];
        let names: Vec<&str> = recipes.iter().map(|r| r.name()).collect();
        assert_eq!(names, ["soqfr", "soqfr-l", "fgam", "gam-l", "hist"]);
        for recipe in &recipes {
            let model = recipe.fit(&dataset).unwrap();
            let preds = model.predict(&dataset).unwrap();
            assert_eq!(preds.len(), dataset.n_subjects());
            assert!(preds.iter().all(|p| p.is_finite()));
            assert!(!model.parameters().is_empty());
            let de = model.deviance_explained().unwrap();
            assert!((0.0..=1.0).contains(&de), "{} deviance explained {de}", recipe.name());
        }
    }

    #[test]
    fn deviance_explained_report_matches_direct_fit() {
        let (obs, _) = location_samples(99, 20, 60);
        let outcomes: Vec<f64> = obs
            .iter()
            .map(|o| 0.5 + 1.5 * o.iter().sum::<f64>() / o.len() as f64)
            .collect();
        let dataset = build_dataset(obs, outcomes.clone());
        let recipe = lmoment_recipe(Family::Gaussian);
        let report = deviance_explained_report(&recipe, &dataset).unwrap();
        assert_eq!(report.metric, MetricKind::DevianceExplained);
        assert_eq!(report.metric.label(), "deviance-explained");
        assert_eq!(report.per_repeat.len(), 1);
        assert!(report.mean > 0.95);

        // The report's value is the plain GLM deviance explained on the
        // same design, checked against a direct fit.
        let grid = QuantileGrid::midpoint(100).unwrap();
        let fit = fit_soqfr_l(&dataset, FEATURE, &[], Family::Gaussian, 2, &grid).unwrap();
        assert_eq!(report.mean, fit.fit.deviance_explained().unwrap());
    }

    #[test]
    fn all_fold_assignments_covers_every_repeat() {
        let plan = CvPlan { k: 3, repeats: 5, seed: 8, stratified: false };
        let outcomes: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let all = all_fold_assignments(&plan, &outcomes).unwrap();
        assert_eq!(all.len(), 5);
        for assignment in all.values() {
            assert_eq!(assignment.len(), 9);
        }
    }
}
