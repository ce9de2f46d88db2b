//! Penalized generalized linear models: identity-link Gaussian and
//! logit-link binomial fits with quadratic roughness penalties, estimated by
//! penalized iteratively reweighted least squares, with generalized
//! cross-validation for smoothing-parameter selection.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_nalgebra, to_nalgebra, SpdSolver};
use crate::util::std_normal_cdf;

const MAX_ITERATIONS: usize = 50;
const SCORE_TOLERANCE: f64 = 1e-8;
const SEPARATION_BOUND: f64 = 1e4;
const MIN_WEIGHT: f64 = 1e-10;
const MU_CLAMP: f64 = 1e-12;

/// Response family; the link is canonical in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Binomial => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        }
    }
}

/// One penalized group of columns. Each penalty matrix gets its own
/// smoothing parameter; the block contributes Σ_k λ_k P_k to the penalty on
/// its coefficients.
#[derive(Debug, Clone)]
pub struct PenalizedBlock {
    pub label: String,
    pub design: Array2<f64>,
    pub penalties: Vec<Array2<f64>>,
}

/// Full model layout: unpenalized columns first (intercept and scalar
/// covariates), then the penalized blocks in order.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub unpenalized: Array2<f64>,
    pub blocks: Vec<PenalizedBlock>,
}

impl ModelSpec {
    pub fn n_obs(&self) -> usize {
        self.unpenalized.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.unpenalized.ncols() + self.blocks.iter().map(|b| b.design.ncols()).sum::<usize>()
    }

    /// Number of smoothing parameters the spec expects, in block order.
    pub fn lambda_count(&self) -> usize {
        self.blocks.iter().map(|b| b.penalties.len()).sum()
    }

    /// Coefficient ranges of the penalized blocks, after the unpenalized
    /// columns.
    pub fn block_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut start = self.unpenalized.ncols();
        self.blocks
            .iter()
            .map(|b| {
                let range = start..start + b.design.ncols();
                start = range.end;
                (b.label.clone(), range)
            })
            .collect()
    }

    fn validate(&self, y: &[f64]) -> Result<()> {
        let n = self.n_obs();
        if y.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: y.len() });
        }
        if n == 0 {
            return Err(Error::NoObservations);
        }
        if self.n_coef() == 0 {
            return Err(Error::InvalidModel("model has no coefficients".into()));
        }
        let bad: Vec<usize> = y
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { context: "response vector".into(), indices: bad });
        }
        for block in &self.blocks {
            if block.design.nrows() != n {
                return Err(Error::LengthMismatch { expected: n, found: block.design.nrows() });
            }
            let width = block.design.ncols();
            for p in &block.penalties {
                if p.nrows() != width || p.ncols() != width {
                    return Err(Error::InvalidModel(format!(
                        "penalty for block '{}' is {}x{}, expected {width}x{width}",
                        block.label,
                        p.nrows(),
                        p.ncols()
                    )));
                }
            }
        }
        if self.family == Family::Binomial {
            if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::NotBinary);
            }
            let ones = y.iter().filter(|v| **v == 1.0).count();
            if ones == 0 || ones == y.len() {
                return Err(Error::SingleClass);
            }
        }
        Ok(())
    }

    fn assemble_design(&self) -> Array2<f64> {
        let n = self.n_obs();
        let mut x = Array2::zeros((n, self.n_coef()));
        let mut col = 0;
        for j in 0..self.unpenalized.ncols() {
            for i in 0..n {
                x[[i, col]] = self.unpenalized[[i, j]];
            }
            col += 1;
        }
        for block in &self.blocks {
            for j in 0..block.design.ncols() {
                for i in 0..n {
                    x[[i, col]] = block.design[[i, j]];
                }
                col += 1;
            }
        }
        x
    }

    fn assemble_penalty(&self, lambdas: &[f64]) -> Result<Array2<f64>> {
        if lambdas.len() != self.lambda_count() {
            return Err(Error::LengthMismatch {
                expected: self.lambda_count(),
                found: lambdas.len(),
            });
        }
        for &l in lambdas {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::NegativeLambda(l));
            }
        }
        let m = self.n_coef();
        let mut s = Array2::zeros((m, m));
        let mut offset = self.unpenalized.ncols();
        let mut lambda_idx = 0;
        for block in &self.blocks {
            let width = block.design.ncols();
            for p in &block.penalties {
                let lambda = lambdas[lambda_idx];
                lambda_idx += 1;
                if lambda == 0.0 {
                    continue;
                }
                for a in 0..width {
                    for b in 0..width {
                        s[[offset + a, offset + b]] += lambda * p[[a, b]];
                    }
                }
            }
            offset += width;
        }
        Ok(s)
    }
}

/// A converged penalized fit with the quantities needed for inference,
/// smoothing-parameter selection, and prediction.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub covariance: Array2<f64>,
    pub edf: f64,
    pub edf_by_coefficient: Vec<f64>,
    pub deviance: f64,
    pub null_deviance: f64,
    pub scale: f64,
    pub iterations: usize,
    pub score_norm: f64,
    pub n_obs: usize,
    pub n_unpenalized: usize,
    pub block_ranges: Vec<(String, Range<usize>)>,
    pub gcv: f64,
}

impl PenalizedFit {
    pub fn block_range(&self, label: &str) -> Option<Range<usize>> {
        self.block_ranges.iter().find(|(l, _)| l == label).map(|(_, r)| r.clone())
    }

    pub fn block_coefficients(&self, label: &str) -> Option<&[f64]> {
        self.block_range(label).map(|r| &self.coefficients[r])
    }

    /// Linear predictor for design rows laid out like the fitted model.
    pub fn predict_linear(&self, design: &Array2<f64>) -> Result<Vec<f64>> {
        if design.ncols() != self.coefficients.len() {
            return Err(Error::LengthMismatch {
                expected: self.coefficients.len(),
                found: design.ncols(),
            });
        }
        Ok((0..design.nrows())
            .map(|i| (0..design.ncols()).map(|j| design[[i, j]] * self.coefficients[j]).sum())
            .collect())
    }

    /// Mean-scale predictions (probabilities for the binomial family).
    pub fn predict_response(&self, design: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_linear(design)?.into_iter().map(|e| self.family.inverse_link(e)).collect())
    }

    /// Fraction of null deviance removed by the model.
    pub fn deviance_explained(&self) -> Result<f64> {
        if self.null_deviance <= 1e-14 * (1.0 + self.deviance.abs()) {
            return Err(Error::ZeroNullDeviance);
        }
        Ok(1.0 - self.deviance / self.null_deviance)
    }

    pub fn standard_error(&self, idx: usize) -> Option<f64> {
        let v = self.covariance[[idx, idx]];
        if v > 0.0 {
            Some(v.sqrt())
        } else {
            None
        }
    }

    /// Two-sided normal-reference p-value for a single coefficient.
    pub fn coefficient_p_value(&self, idx: usize) -> Option<f64> {
        let se = self.standard_error(idx)?;
        let z = self.coefficients[idx] / se;
        Some(2.0 * (1.0 - std_normal_cdf(z.abs())))
    }
}

/// A curve with a pointwise 95% normal-reference band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveBand {
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Evaluate a coefficient subcurve B·θ over evaluation rows with its
/// pointwise band from the fit covariance.
pub fn pointwise_band(
    fit: &PenalizedFit,
    range: Range<usize>,
    basis_rows: &Array2<f64>,
) -> Result<CurveBand> {
    if range.end > fit.coefficients.len() || basis_rows.ncols() != range.len() {
        return Err(Error::LengthMismatch { expected: range.len(), found: basis_rows.ncols() });
    }
    let theta = &fit.coefficients[range.clone()];
    let mut estimate = Vec::with_capacity(basis_rows.nrows());
    let mut lower = Vec::with_capacity(basis_rows.nrows());
    let mut upper = Vec::with_capacity(basis_rows.nrows());
    for i in 0..basis_rows.nrows() {
        let est: f64 = (0..theta.len()).map(|k| basis_rows[[i, k]] * theta[k]).sum();
        let mut var = 0.0;
        for k in 0..theta.len() {
            for l in 0..theta.len() {
                var += basis_rows[[i, k]]
                    * fit.covariance[[range.start + k, range.start + l]]
                    * basis_rows[[i, l]];
            }
        }
        let half = 1.96 * var.max(0.0).sqrt();
        estimate.push(est);
        lower.push(est - half);
        upper.push(est + half);
    }
    Ok(CurveBand { estimate, lower, upper })
}

/// Fit the model at fixed smoothing parameters.
pub fn fit_pirls(spec: &ModelSpec, y: &[f64], lambdas: &[f64]) -> Result<PenalizedFit> {
    fit_pirls_capped(spec, y, lambdas, MAX_ITERATIONS)
}

pub(crate) fn fit_pirls_capped(
    spec: &ModelSpec,
    y: &[f64],
    lambdas: &[f64],
    max_iterations: usize,
) -> Result<PenalizedFit> {
    spec.validate(y)?;
    let s = spec.assemble_penalty(lambdas)?;
    let x = spec.assemble_design();
    let xn = to_nalgebra(&x);
    let sn = to_nalgebra(&s);
    let yv = DVector::from_column_slice(y);
    match spec.family {
        Family::Gaussian => fit_gaussian(spec, &xn, &sn, &yv, lambdas),
        Family::Binomial => fit_binomial(spec, &xn, &sn, &yv, lambdas, max_iterations),
    }
}

struct Moments {
    solver: SpdSolver,
    edf: f64,
    edf_by_coefficient: Vec<f64>,
}

// Weighted cross-product pieces at given working weights: the penalized
// normal matrix XᵀWX + S, its factorization, and the effective degrees of
// freedom tr((XᵀWX + S)⁻¹ XᵀWX) with its per-coefficient diagonal.
fn weighted_moments(xn: &DMatrix<f64>, sn: &DMatrix<f64>, w: &[f64]) -> Result<Moments> {
    let mut xw = xn.clone();
    for (i, wi) in w.iter().enumerate() {
        let sqrt_w = wi.sqrt();
        for j in 0..xw.ncols() {
            xw[(i, j)] *= sqrt_w;
        }
    }
    let xtwx = xw.transpose() * &xw;
    let h = &xtwx + sn;
    let solver = SpdSolver::new(&h)?;
    if solver.ridge() > 0.0 {
        log::debug!("penalized normal matrix required a ridge of {:.3e}", solver.ridge());
    }
    let edf_matrix = solver.inverse() * &xtwx;
    let edf_by_coefficient: Vec<f64> = (0..edf_matrix.nrows()).map(|i| edf_matrix[(i, i)]).collect();
    let edf = edf_by_coefficient.iter().sum();
    Ok(Moments { solver, edf, edf_by_coefficient })
}

fn gaussian_deviance(y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    y.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn binomial_deviance(y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    y.iter()
        .zip(mu.iter())
        .map(|(yi, mi)| {
            let m = mi.clamp(MU_CLAMP, 1.0 - MU_CLAMP);
            -2.0 * (yi * m.ln() + (1.0 - yi) * (1.0 - m).ln())
        })
        .sum()
}

fn score_norm(
    xn: &DMatrix<f64>,
    sn: &DMatrix<f64>,
    y: &DVector<f64>,
    mu: &DVector<f64>,
    beta: &DVector<f64>,
) -> f64 {
    let score = xn.transpose() * (y - mu) - sn * beta;
    score.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn finish_fit(
    spec: &ModelSpec,
    lambdas: &[f64],
    moments: &Moments,
    beta: &DVector<f64>,
    deviance: f64,
    null_deviance: f64,
    iterations: usize,
    score: f64,
) -> Result<PenalizedFit> {
    let n = spec.n_obs() as f64;
    if n - moments.edf < 1e-6 {
        return Err(Error::SingularSystem);
    }
    let scale = match spec.family {
        Family::Gaussian => deviance / (n - moments.edf),
        Family::Binomial => 1.0,
    };
    let covariance = from_nalgebra(&(moments.solver.inverse() * scale));
    let gcv = n * deviance / ((n - moments.edf) * (n - moments.edf));
    Ok(PenalizedFit {
        family: spec.family,
        coefficients: beta.iter().cloned().collect(),
        lambdas: lambdas.to_vec(),
        covariance,
        edf: moments.edf,
        edf_by_coefficient: moments.edf_by_coefficient.clone(),
        deviance,
        null_deviance,
        scale,
        iterations,
        score_norm: score,
        n_obs: spec.n_obs(),
        n_unpenalized: spec.unpenalized.ncols(),
        block_ranges: spec.block_ranges(),
        gcv,
    })
}

// Identity link with constant weights: the penalized least-squares solution
// in one step.
fn fit_gaussian(
    spec: &ModelSpec,
    xn: &DMatrix<f64>,
    sn: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
) -> Result<PenalizedFit> {
    let moments = weighted_moments(xn, sn, &vec![1.0; spec.n_obs()])?;
    let beta = moments.solver.solve(&(xn.transpose() * y));
    let mu = xn * &beta;
    let deviance = gaussian_deviance(y, &mu);
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let null_deviance = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let score = score_norm(xn, sn, y, &mu, &beta);
    finish_fit(spec, lambdas, &moments, &beta, deviance, null_deviance, 1, score)
}

fn fit_binomial(
    spec: &ModelSpec,
    xn: &DMatrix<f64>,
    sn: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
    max_iterations: usize,
) -> Result<PenalizedFit> {
    let n = spec.n_obs();
    let m = spec.n_coef();
    let penalized_deviance = |beta: &DVector<f64>, mu: &DVector<f64>| -> f64 {
        binomial_deviance(y, mu) + (beta.transpose() * sn * beta)[(0, 0)]
    };

    let mut beta = DVector::zeros(m);
    let mut mu = DVector::from_iterator(n, y.iter().map(|yi| (yi + 0.5) / 2.0));
    let mut eta = DVector::from_iterator(n, mu.iter().map(|mi: &f64| (mi / (1.0 - mi)).ln()));
    // The starting means do not come from any coefficient vector, so there is
    // no feasible deviance to halve against until one step has been taken.
    let mut pdev: Option<f64> = None;
    let mut score = f64::INFINITY;

    for iteration in 1..=max_iterations {
        let w: Vec<f64> = mu.iter().map(|mi| (mi * (1.0 - mi)).max(MIN_WEIGHT)).collect();
        let moments = weighted_moments(xn, sn, &w)?;
        let wz = DVector::from_fn(n, |i, _| w[i] * (eta[i] + (y[i] - mu[i]) / w[i]));
        let proposal = moments.solver.solve(&(xn.transpose() * wz));

        // Step halving keeps the penalized deviance from increasing once a
        // feasible iterate exists.
        let direction = &proposal - &beta;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &direction * step;
            let eta_c = xn * &candidate;
            let mu_c = eta_c.map(|e| 1.0 / (1.0 + (-e).exp()));
            let pdev_c = penalized_deviance(&candidate, &mu_c);
            let acceptable = match pdev {
                None => true,
                Some(prev) => pdev_c <= prev + 1e-12 * (1.0 + prev.abs()),
            };
            if acceptable {
                beta = candidate;
                eta = eta_c;
                mu = mu_c;
                pdev = Some(pdev_c);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No productive step length remains; report the stall.
            return Err(Error::NonConvergence {
                iterations: iteration,
                score_norm: score,
                coefficients: beta.iter().cloned().collect(),
            });
        }

        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::SeparationSuspected);
        }
        score = score_norm(xn, sn, y, &mu, &beta);
        if score < SCORE_TOLERANCE {
            // A margin that predicts every label essentially exactly means
            // the classes are linearly separated and the unpenalized part of
            // the likelihood has no maximizer; the iterate only stopped
            // because the gradient flattened out.
            let worst = y.iter().zip(mu.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if worst < 1e-6 {
                return Err(Error::SeparationSuspected);
            }
            let w: Vec<f64> = mu.iter().map(|mi| (mi * (1.0 - mi)).max(MIN_WEIGHT)).collect();
            let moments = weighted_moments(xn, sn, &w)?;
            let deviance = binomial_deviance(y, &mu);
            let ybar = y.iter().sum::<f64>() / n as f64;
            let null_deviance =
                y.iter().map(|yi| -2.0 * (yi * ybar.ln() + (1.0 - yi) * (1.0 - ybar).ln())).sum();
            return finish_fit(
                spec,
                lambdas,
                &moments,
                &beta,
                deviance,
                null_deviance,
                iteration,
                score,
            );
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
        score_norm: score,
        coefficients: beta.iter().cloned().collect(),
    })
}

/// One evaluated smoothing-parameter candidate; `gcv` is absent when the fit
/// failed and was skipped.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub lambdas: Vec<f64>,
    pub gcv: Option<f64>,
}

/// Result of a smoothing-parameter search: the winning fit plus the full
/// evaluation trace.
#[derive(Debug)]
pub struct LambdaSelection {
    pub fit: PenalizedFit,
    pub scores: Vec<CandidateScore>,
}

fn sum_log(lambdas: &[f64]) -> f64 {
    lambdas.iter().map(|l| l.max(1e-300).ln()).sum()
}

// Strict improvement, with near-ties broken toward the smoother fit
// (larger total log smoothing).
pub(crate) fn gcv_improves(candidate: (f64, f64), incumbent: (f64, f64)) -> bool {
    let (g_new, s_new) = candidate;
    let (g_old, s_old) = incumbent;
    let tol = 1e-10 * (1.0 + g_old.abs());
    if g_new < g_old - tol {
        return true;
    }
    (g_new - g_old).abs() <= tol && s_new > s_old
}

/// Fit every candidate vector and keep the best GCV score. Failed fits are
/// skipped with a warning; if all candidates fail the last error is
/// returned wrapped in `AllCandidatesFailed`.
pub fn select_lambda_gcv(
    spec: &ModelSpec,
    y: &[f64],
    candidates: &[Vec<f64>],
) -> Result<LambdaSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no smoothing-parameter candidates".into()));
    }
    let mut best: Option<PenalizedFit> = None;
    let mut scores = Vec::with_capacity(candidates.len());
    let mut last_error: Option<Error> = None;
    for cand in candidates {
        match fit_pirls(spec, y, cand) {
            Ok(fit) => {
                scores.push(CandidateScore { lambdas: cand.clone(), gcv: Some(fit.gcv) });
                let replace = match &best {
                    None => true,
                    Some(b) => gcv_improves(
                        (fit.gcv, sum_log(&fit.lambdas)),
                        (b.gcv, sum_log(&b.lambdas)),
                    ),
                };
                if replace {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::warn!("smoothing candidate {cand:?} failed: {e}");
                scores.push(CandidateScore { lambdas: cand.clone(), gcv: None });
                last_error = Some(e);
            }
        }
    }
    match best {
        Some(fit) => Ok(LambdaSelection { fit, scores }),
        None => Err(Error::AllCandidatesFailed(Box::new(last_error.unwrap()))),
    }
}

/// Coordinate-descent GCV search over per-parameter grids, for models with
/// too many smoothing parameters to scan exhaustively. Starts from the
/// middle of each grid and sweeps until a full cycle makes no change.
pub fn select_lambda_coordinate(
    spec: &ModelSpec,
    y: &[f64],
    grids: &[Vec<f64>],
    max_cycles: usize,
) -> Result<LambdaSelection> {
    if grids.len() != spec.lambda_count() {
        return Err(Error::LengthMismatch { expected: spec.lambda_count(), found: grids.len() });
    }
    if grids.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("empty smoothing-parameter grid".into()));
    }
    let mut current: Vec<f64> = grids.iter().map(|g| g[g.len() / 2]).collect();
    let mut best: Option<PenalizedFit> = None;
    let mut scores = Vec::new();
    let mut last_error: Option<Error> = None;
    let mut memo: HashMap<Vec<u64>, Option<f64>> = HashMap::new();

    for _ in 0..max_cycles.max(1) {
        let mut changed = false;
        for slot in 0..grids.len() {
            for value in &grids[slot] {
                let mut cand = current.clone();
                cand[slot] = *value;
                let key: Vec<u64> = cand.iter().map(|v| v.to_bits()).collect();
                if memo.contains_key(&key) {
                    continue;
                }
                match fit_pirls(spec, y, &cand) {
                    Ok(fit) => {
                        memo.insert(key, Some(fit.gcv));
                        scores.push(CandidateScore { lambdas: cand.clone(), gcv: Some(fit.gcv) });
                        let replace = match &best {
                            None => true,
                            Some(b) => gcv_improves(
                                (fit.gcv, sum_log(&fit.lambdas)),
                                (b.gcv, sum_log(&b.lambdas)),
                            ),
                        };
                        if replace {
                            current = cand;
                            best = Some(fit);
                            changed = true;
                        }
                    }
                    Err(e) => {
                        log::warn!("smoothing candidate {cand:?} failed: {e}");
                        memo.insert(key, None);
                        scores.push(CandidateScore { lambdas: cand, gcv: None });
                        last_error = Some(e);
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    match best {
        Some(fit) => Ok(LambdaSelection { fit, scores }),
        None => Err(Error::AllCandidatesFailed(Box::new(last_error.unwrap()))),
    }
}

/// Logarithmically spaced smoothing-parameter grid from `lo` to `hi`.
pub fn log_lambda_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2, "grid needs 0 < lo < hi and count >= 2");
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Cartesian product of per-parameter grids, in row-major order.
pub fn cartesian_candidates(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for grid in grids {
        let mut next = Vec::with_capacity(out.len() * grid.len());
        for prefix in &out {
            for v in grid {
                let mut row = prefix.clone();
                row.push(*v);
                next.push(row);
            }
        }
        out = next;
    }
    out
}
