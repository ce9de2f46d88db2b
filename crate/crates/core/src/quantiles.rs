//! Quantile-function estimation on shared probability grids, plus the
//! repeated-measures dataset container the rest of the crate consumes.
//!
//! A subject's within-person distribution is represented by its quantile
//! function evaluated on a fixed grid of probability levels; all integrals
//! over (0,1) elsewhere in the crate are midpoint-rule sums on that grid.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Strictly increasing probability levels in (0,1), shared by a family of
/// quantile functions. Cloning is cheap (the level vector is shared).
///
/// Each level owns the cell between the midpoints to its neighbours (with 0
/// and 1 as outer edges); `integrate` is the corresponding midpoint rule,
/// which is exact for functions constant on cells and, on the default
/// equally-spaced midpoint grid, exact for linear integrands as well.
#[derive(Debug, Clone)]
pub struct QuantileGrid {
    levels: Arc<[f64]>,
    weights: Arc<[f64]>,
}

impl PartialEq for QuantileGrid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.levels, &other.levels) || self.levels == other.levels
    }
}

impl QuantileGrid {
    /// Grid of `m` midpoint levels p_j = (j − 0.5)/m.
    pub fn midpoint(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidDomain("grid resolution must be positive".into()));
        }
        let levels: Vec<f64> = (1..=m).map(|j| (j as f64 - 0.5) / m as f64).collect();
        Self::from_levels(levels)
    }

    /// Grid from explicit levels; they must be finite, strictly increasing,
    /// and lie strictly inside (0,1).
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidDomain("grid must contain at least one level".into()));
        }
        for (i, &p) in levels.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p >= 1.0 {
                return Err(Error::InvalidDomain(format!(
                    "grid level {p} at position {i} is outside (0,1)"
                )));
            }
            if i > 0 && p <= levels[i - 1] {
                return Err(Error::InvalidDomain(format!(
                    "grid levels must be strictly increasing (position {i})"
                )));
            }
        }
        let m = levels.len();
        let mut weights = Vec::with_capacity(m);
        let mut left = 0.0;
        for j in 0..m {
            let right = if j + 1 < m { 0.5 * (levels[j] + levels[j + 1]) } else { 1.0 };
            weights.push(right - left);
            left = right;
        }
        Ok(QuantileGrid { levels: levels.into(), weights: weights.into() })
    }

    pub fn resolution(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Midpoint-rule cell widths; they sum to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Midpoint-rule approximation of ∫₀¹ f(p) dp from values of f on the grid.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.levels.len() {
            return Err(Error::LengthMismatch { expected: self.levels.len(), found: values.len() });
        }
        Ok(self.weights.iter().zip(values).map(|(w, v)| w * v).sum())
    }
}

impl Default for QuantileGrid {
    /// The crate-wide default: 100 midpoint levels.
    fn default() -> Self {
        QuantileGrid::midpoint(100).expect("default grid is valid")
    }
}

/// Midpoint-rule integral of grid values; free-function form of
/// [`QuantileGrid::integrate`].
pub fn integrate_on_grid(values: &[f64], grid: &QuantileGrid) -> Result<f64> {
    grid.integrate(values)
}

/// A quantile function evaluated on a grid, tagged with the subject and
/// feature it came from (empty when not applicable).
#[derive(Debug, Clone)]
pub struct QuantileFunction {
    pub subject_id: String,
    pub feature_id: String,
    grid: QuantileGrid,
    values: Vec<f64>,
}

impl QuantileFunction {
    /// Values must be finite and match the grid length. Monotonicity is
    /// guaranteed for estimator output but not enforced here, so that
    /// truncated reconstructions can also be carried around.
    pub fn new(grid: QuantileGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.resolution() {
            return Err(Error::LengthMismatch { expected: grid.resolution(), found: values.len() });
        }
        let bad: Vec<usize> =
            values.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { context: "quantile values".into(), indices: bad });
        }
        Ok(QuantileFunction { subject_id: String::new(), feature_id: String::new(), grid, values })
    }

    pub fn with_ids(mut self, subject_id: &str, feature_id: &str) -> Self {
        self.subject_id = subject_id.to_string();
        self.feature_id = feature_id.to_string();
        self
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean of the distribution: ∫₀¹ Q(p) dp on the grid.
    pub fn mean(&self) -> f64 {
        self.grid.integrate(&self.values).expect("values match grid by construction")
    }
}

/// Linear-interpolation quantile estimator on order statistics.
///
/// At level p with n sorted observations, let t = (n+1)p: the estimate is
/// X_(1) for t ≤ 1, X_(n) for t ≥ n, and otherwise the interpolation
/// (1−w)·X_(k) + w·X_(k+1) with k = ⌊t⌋, w = t − k.
pub fn estimate_quantile_function(sample: &[f64], grid: &QuantileGrid) -> Result<QuantileFunction> {
    if sample.is_empty() {
        return Err(Error::NoObservations);
    }
    let bad: Vec<usize> =
        sample.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite { context: "sample".into(), indices: bad });
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let values = grid
        .levels()
        .iter()
        .map(|&p| {
            let t = (n as f64 + 1.0) * p;
            if t <= 1.0 {
                sorted[0]
            } else if t >= n as f64 {
                sorted[n - 1]
            } else {
                let k = t.floor() as usize; // 1-based order statistic index
                let w = t - k as f64;
                (1.0 - w) * sorted[k - 1] + w * sorted[k]
            }
        })
        .collect();
    QuantileFunction::new(grid.clone(), values)
}

/// Pointwise mean of quantile functions sharing a grid: the barycenter of
/// the distributions under the 2-Wasserstein geometry.
pub fn group_mean_quantile(curves: &[QuantileFunction]) -> Result<QuantileFunction> {
    let first = curves.first().ok_or(Error::NoObservations)?;
    let m = first.grid.resolution();
    let mut acc = vec![0.0; m];
    for qf in curves {
        if qf.grid != first.grid {
            return Err(Error::GridMismatch);
        }
        for (a, v) in acc.iter_mut().zip(qf.values()) {
            *a += v;
        }
    }
    let k = curves.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    let feature = first.feature_id.clone();
    Ok(QuantileFunction::new(first.grid.clone(), acc)?.with_ids("", &feature))
}

/// 2-Wasserstein distance between two distributions represented by quantile
/// functions on the same grid: (∫ (Q_a − Q_b)² dp)^{1/2}.
pub fn wasserstein2_distance(a: &QuantileFunction, b: &QuantileFunction) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let sq: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(a.grid.integrate(&sq)?.sqrt())
}

/// Whether outcomes are all in {0,1} (binary) or general reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeType {
    Binary,
    Continuous,
}

/// One subject: scalar outcome, covariates aligned with the dataset's
/// covariate names, and repeated raw observations per feature.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub observations: BTreeMap<String, Vec<f64>>,
}

/// Subjects with repeated measurements per feature, plus an optional
/// feature → domain assignment for multi-block analyses.
#[derive(Debug, Clone, Default)]
pub struct RepeatedMeasuresDataset {
    pub subjects: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
    pub domains: BTreeMap<String, String>,
}

impl RepeatedMeasuresDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.outcome).collect()
    }

    pub fn outcome_type(&self) -> OutcomeType {
        let binary = self.subjects.iter().all(|s| s.outcome == 0.0 || s.outcome == 1.0);
        if binary && !self.subjects.is_empty() { OutcomeType::Binary } else { OutcomeType::Continuous }
    }

    /// Union of feature ids across subjects, sorted.
    pub fn feature_ids(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for s in &self.subjects {
            for f in s.observations.keys() {
                set.insert(f.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Structural checks: unique subject ids, covariate rows matching the
    /// covariate-name list, finite outcomes/covariates/observations.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.subject_id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate subject id `{}`",
                    s.subject_id
                )));
            }
            if s.covariates.len() != self.covariate_names.len() {
                return Err(Error::LengthMismatch {
                    expected: self.covariate_names.len(),
                    found: s.covariates.len(),
                });
            }
            if !s.outcome.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("outcome of subject `{}`", s.subject_id),
                    indices: vec![],
                });
            }
            for (i, c) in s.covariates.iter().enumerate() {
                if !c.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("covariates of subject `{}`", s.subject_id),
                        indices: vec![i],
                    });
                }
            }
            for (f, obs) in &s.observations {
                let bad: Vec<usize> =
                    obs.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
                if !bad.is_empty() {
                    return Err(Error::NonFinite {
                        context: format!("observations of subject `{}` feature `{f}`", s.subject_id),
                        indices: bad,
                    });
                }
            }
        }
        Ok(())
    }

    /// Estimate one quantile function per subject for `feature`, in subject
    /// order. Subjects missing the feature, or with fewer than 2
    /// observations for it, are errors naming the offenders.
    pub fn quantile_functions(
        &self,
        feature: &str,
        grid: &QuantileGrid,
    ) -> Result<Vec<QuantileFunction>> {
        let missing: Vec<String> = self
            .subjects
            .iter()
            .filter(|s| !s.observations.contains_key(feature))
            .map(|s| s.subject_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFeature { feature: feature.into(), subjects: missing });
        }
        for s in &self.subjects {
            let n = s.observations[feature].len();
            if n < 2 {
                return Err(Error::TooFewObservations {
                    subject: s.subject_id.clone(),
                    feature: feature.into(),
                    n,
                });
            }
        }
        self.subjects
            .par_iter()
            .map(|s| {
                estimate_quantile_function(&s.observations[feature], grid)
                    .map(|qf| qf.with_ids(&s.subject_id, feature))
            })
            .collect()
    }

    /// Raw observation series for `feature`, one slice per subject in
    /// subject order. Subjects missing the feature are an error naming the
    /// offenders.
    pub fn observation_series(&self, feature: &str) -> Result<Vec<&[f64]>> {
        let missing: Vec<String> = self
            .subjects
            .iter()
            .filter(|s| !s.observations.contains_key(feature))
            .map(|s| s.subject_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFeature { feature: feature.into(), subjects: missing });
        }
        Ok(self.subjects.iter().map(|s| s.observations[feature].as_slice()).collect())
    }

    /// Dataset restricted to the given subject indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> RepeatedMeasuresDataset {
        RepeatedMeasuresDataset {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            domains: self.domains.clone(),
        }
    }

    /// Covariate columns selected by name, in subject order (n × names.len()).
    pub fn covariate_columns(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            let idx = self
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownCovariate(name.clone()))?;
            cols.push(self.subjects.iter().map(|s| s.covariates[idx]).collect());
        }
        Ok(cols)
    }
}
