//! Regression models with a distribution-valued predictor: linear
//! functional effects of the quantile function, tensor-product surfaces for
//! nonlinear quantile effects, (additive) models on L-moment summaries, and
//! a histogram-composition baseline. All models share the penalized GLM
//! engine and support scalar adjustment covariates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmoments::{lmoments_from_quantile, LegendreBasis};
use crate::pglm::{
    cartesian_candidates, fit_pirls, log_lambda_grid, pointwise_band, select_lambda_coordinate,
    select_lambda_gcv, CurveBand, Family, ModelSpec, PenalizedBlock, PenalizedFit,
};
use crate::quantiles::{QuantileFunction, QuantileGrid, RepeatedMeasuresDataset};
use crate::splines::{
    gauss_legendre, kron, second_derivative_penalty, tensor_design_row, PenaltyMatrix, SplineBasis,
};

const FUNCTIONAL_BLOCK: &str = "functional";

/// Default smoothing-parameter grid: 41 log-spaced values spanning
/// [1e-6, 1e6].
pub fn default_lambda_grid() -> Vec<f64> {
    log_lambda_grid(1e-6, 1e6, 41)
}

/// How the smoothing parameter of a single penalty is chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LambdaChoice {
    Fixed(f64),
    Grid(Vec<f64>),
}

impl Default for LambdaChoice {
    fn default() -> Self {
        LambdaChoice::Grid(default_lambda_grid())
    }
}

impl LambdaChoice {
    fn candidates(&self) -> Vec<Vec<f64>> {
        match self {
            LambdaChoice::Fixed(l) => vec![vec![*l]],
            LambdaChoice::Grid(g) => g.iter().map(|l| vec![*l]).collect(),
        }
    }

    fn warn_if_on_edge(&self, chosen: f64) {
        if let LambdaChoice::Grid(g) = self {
            if g.len() >= 2 && (chosen == g[0] || chosen == *g.last().unwrap()) {
                log::warn!("selected smoothing parameter {chosen:.3e} sits on the grid edge");
            }
        }
    }
}

/// A coefficient curve over quantile levels with 95% pointwise bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalCoefficient {
    pub levels: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FunctionalCoefficient {
    fn from_band(levels: Vec<f64>, band: CurveBand) -> Self {
        FunctionalCoefficient {
            levels,
            estimate: band.estimate,
            lower: band.lower,
            upper: band.upper,
        }
    }

    /// ∫ β̂(p) dp on the stored levels (midpoint weights).
    pub fn integral(&self, grid: &QuantileGrid) -> Result<f64> {
        grid.integrate(&self.estimate)
    }
}

// Functional basis over quantile levels: either a cubic B-spline basis or
// the shifted Legendre polynomials (whose coefficients are then projection
// L-moment weights).
#[derive(Debug, Clone)]
enum PBasis {
    Spline(SplineBasis),
    Legendre { basis: LegendreBasis, size: usize },
}

impl PBasis {
    fn eval_matrix(&self, points: &[f64]) -> Array2<f64> {
        match self {
            PBasis::Spline(b) => b.design_matrix(points),
            PBasis::Legendre { basis, size } => {
                let mut m = Array2::zeros((points.len(), *size));
                for (i, &p) in points.iter().enumerate() {
                    for r in 0..*size {
                        m[[i, r]] = basis.eval(r, p);
                    }
                }
                m
            }
        }
    }

    fn curvature_penalty(&self) -> PenaltyMatrix {
        match self {
            PBasis::Spline(b) => second_derivative_penalty(b),
            PBasis::Legendre { basis, size } => {
                // Exact Gauss quadrature of ∫ P_r''(p) P_s''(p) dp on [0,1];
                // the integrand is polynomial of degree ≤ 2(size−3).
                let k = *size;
                let mut penalty = Array2::zeros((k, k));
                if k < 3 {
                    return penalty;
                }
                let (nodes, weights) = gauss_legendre(k);
                for (z, w) in nodes.iter().zip(&weights) {
                    let p = 0.5 * (z + 1.0);
                    let wq = 0.5 * w;
                    let d2: Vec<f64> = (0..k)
                        .map(|r| {
                            let mut acc = 0.0;
                            for c in (2..=r).rev() {
                                acc = acc * p
                                    + basis.coefficient(r, c) as f64 * (c * (c - 1)) as f64;
                            }
                            acc
                        })
                        .collect();
                    for a in 0..k {
                        for b in 0..k {
                            penalty[[a, b]] += wq * d2[a] * d2[b];
                        }
                    }
                }
                penalty
            }
        }
    }
}

/// Basis family for the linear functional-coefficient model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoqfrBasis {
    Spline { size: usize },
    Legendre { size: usize },
}

#[derive(Debug, Clone)]
pub struct SoqfrOptions {
    pub grid: QuantileGrid,
    pub basis: SoqfrBasis,
    pub lambda: LambdaChoice,
}

impl Default for SoqfrOptions {
    fn default() -> Self {
        SoqfrOptions {
            grid: QuantileGrid::default(),
            basis: SoqfrBasis::Spline { size: 10 },
            lambda: LambdaChoice::default(),
        }
    }
}

// Intercept plus the requested scalar covariate columns.
fn scalar_design(
    dataset: &RepeatedMeasuresDataset,
    covariates: &[String],
) -> Result<Array2<f64>> {
    let cols = dataset.covariate_columns(covariates)?;
    let n = dataset.n_subjects();
    let mut m = Array2::zeros((n, 1 + cols.len()));
    for i in 0..n {
        m[[i, 0]] = 1.0;
    }
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            m[[i, 1 + j]] = col[i];
        }
    }
    Ok(m)
}

fn build_pbasis(basis: SoqfrBasis) -> Result<PBasis> {
    match basis {
        SoqfrBasis::Spline { size } => Ok(PBasis::Spline(SplineBasis::cubic((0.0, 1.0), size)?)),
        SoqfrBasis::Legendre { size } => {
            if size == 0 {
                return Err(Error::InvalidArgument("Legendre basis needs size >= 1".into()));
            }
            Ok(PBasis::Legendre { basis: LegendreBasis::new(size - 1)?, size })
        }
    }
}

// Design columns ∫ Q_i(p) θ_k(p) dp for every subject and basis function.
fn functional_design(
    qfs: &[QuantileFunction],
    theta_at_levels: &Array2<f64>,
    grid: &QuantileGrid,
) -> Array2<f64> {
    let n = qfs.len();
    let size = theta_at_levels.ncols();
    let weights = grid.weights();
    let mut design = Array2::zeros((n, size));
    for (i, qf) in qfs.iter().enumerate() {
        for k in 0..size {
            let mut acc = 0.0;
            for (j, q) in qf.values().iter().enumerate() {
                acc += weights[j] * q * theta_at_levels[[j, k]];
            }
            design[[i, k]] = acc;
        }
    }
    design
}

/// Linear functional-coefficient fit: g(μ_i) = α + Z_iᵀγ + ∫Q_i(p)β(p)dp.
#[derive(Debug)]
pub struct SoqfrFit {
    pub fit: PenalizedFit,
    pub beta: FunctionalCoefficient,
    feature: String,
    covariates: Vec<String>,
    grid: QuantileGrid,
    basis: PBasis,
}

impl SoqfrFit {
    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    fn design_for(&self, dataset: &RepeatedMeasuresDataset) -> Result<Array2<f64>> {
        let unpenalized = scalar_design(dataset, &self.covariates)?;
        let qfs = dataset.quantile_functions(&self.feature, &self.grid)?;
        let theta = self.basis.eval_matrix(self.grid.levels());
        let func = functional_design(&qfs, &theta, &self.grid);
        let mut full = Array2::zeros((dataset.n_subjects(), unpenalized.ncols() + func.ncols()));
        for i in 0..dataset.n_subjects() {
            for j in 0..unpenalized.ncols() {
                full[[i, j]] = unpenalized[[i, j]];
            }
            for j in 0..func.ncols() {
                full[[i, unpenalized.ncols() + j]] = func[[i, j]];
            }
        }
        Ok(full)
    }

    /// Linear predictor for (possibly new) subjects.
    pub fn linear_predictor(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_linear(&self.design_for(dataset)?)
    }

    /// Mean-scale predictions for (possibly new) subjects.
    pub fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_response(&self.design_for(dataset)?)
    }
}

pub fn fit_soqfr(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    covariates: &[String],
    family: Family,
    options: &SoqfrOptions,
) -> Result<SoqfrFit> {
    let y = dataset.outcomes();
    let unpenalized = scalar_design(dataset, covariates)?;
    let qfs = dataset.quantile_functions(feature, &options.grid)?;
    let basis = build_pbasis(options.basis)?;
    let theta = basis.eval_matrix(options.grid.levels());
    let design = functional_design(&qfs, &theta, &options.grid);
    let penalty = basis.curvature_penalty();
    let spec = ModelSpec {
        family,
        unpenalized,
        blocks: vec![PenalizedBlock {
            label: FUNCTIONAL_BLOCK.into(),
            design,
            penalties: vec![penalty],
        }],
    };
    let fit = match &options.lambda {
        LambdaChoice::Fixed(l) => fit_pirls(&spec, &y, &[*l])?,
        choice @ LambdaChoice::Grid(_) => {
            let sel = select_lambda_gcv(&spec, &y, &choice.candidates())?;
            choice.warn_if_on_edge(sel.fit.lambdas[0]);
            sel.fit
        }
    };
    let range = fit.block_range(FUNCTIONAL_BLOCK).unwrap();
    let band = pointwise_band(&fit, range, &theta)?;
    let beta = FunctionalCoefficient::from_band(options.grid.levels().to_vec(), band);
    Ok(SoqfrFit {
        fit,
        beta,
        feature: feature.to_string(),
        covariates: covariates.to_vec(),
        grid: options.grid.clone(),
        basis,
    })
}

/// GLM on the first K L-moments of the feature's quantile functions, with
/// the induced coefficient curve β(p) = Σ_k β̂_k P_{k−1}(p).
#[derive(Debug)]
pub struct SoqfrLFit {
    pub fit: PenalizedFit,
    pub beta: FunctionalCoefficient,
    /// Wald p-values of the L-moment coefficients, in order L1..LK.
    pub lmoment_p_values: Vec<Option<f64>>,
    feature: String,
    covariates: Vec<String>,
    grid: QuantileGrid,
    order: usize,
}

impl SoqfrLFit {
    fn design_for(&self, dataset: &RepeatedMeasuresDataset) -> Result<Array2<f64>> {
        let unpenalized = scalar_design(dataset, &self.covariates)?;
        let qfs = dataset.quantile_functions(&self.feature, &self.grid)?;
        let n = dataset.n_subjects();
        let mut full = Array2::zeros((n, unpenalized.ncols() + self.order));
        for i in 0..n {
            for j in 0..unpenalized.ncols() {
                full[[i, j]] = unpenalized[[i, j]];
            }
            let lm = lmoments_from_quantile(&qfs[i], self.order)?;
            for k in 0..self.order {
                full[[i, unpenalized.ncols() + k]] = lm.values()[k];
            }
        }
        Ok(full)
    }

    pub fn linear_predictor(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_linear(&self.design_for(dataset)?)
    }

    pub fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_response(&self.design_for(dataset)?)
    }
}

pub fn fit_soqfr_l(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    covariates: &[String],
    family: Family,
    order: usize,
    grid: &QuantileGrid,
) -> Result<SoqfrLFit> {
    if order == 0 {
        return Err(Error::InvalidArgument("L-moment order must be >= 1".into()));
    }
    let y = dataset.outcomes();
    let scalar = scalar_design(dataset, covariates)?;
    let qfs = dataset.quantile_functions(feature, grid)?;
    let n = dataset.n_subjects();
    let n_scalar = scalar.ncols();
    let mut unpenalized = Array2::zeros((n, n_scalar + order));
    for i in 0..n {
        for j in 0..n_scalar {
            unpenalized[[i, j]] = scalar[[i, j]];
        }
        let lm = lmoments_from_quantile(&qfs[i], order)?;
        for k in 0..order {
            unpenalized[[i, n_scalar + k]] = lm.values()[k];
        }
    }
    let spec = ModelSpec { family, unpenalized, blocks: Vec::new() };
    let fit = fit_pirls(&spec, &y, &[])?;
    let lmoment_p_values: Vec<Option<f64>> =
        (0..order).map(|k| fit.coefficient_p_value(n_scalar + k)).collect();
    // Induced coefficient curve in the Legendre expansion.
    let legendre = LegendreBasis::new(order - 1)?;
    let mut rows = Array2::zeros((grid.resolution(), order));
    for (j, &p) in grid.levels().iter().enumerate() {
        for r in 0..order {
            rows[[j, r]] = legendre.eval(r, p);
        }
    }
    let band = pointwise_band(&fit, n_scalar..n_scalar + order, &rows)?;
    let beta = FunctionalCoefficient::from_band(grid.levels().to_vec(), band);
    Ok(SoqfrLFit {
        fit,
        beta,
        lmoment_p_values,
        feature: feature.to_string(),
        covariates: covariates.to_vec(),
        grid: grid.clone(),
        order,
    })
}

/// Tensor-product surface coefficient F̂(q,p) with the subject-mean
/// centering folded into a constant offset.
#[derive(Debug, Clone)]
pub struct SurfaceCoefficient {
    basis_q: SplineBasis,
    basis_p: SplineBasis,
    theta: Vec<f64>,
    offset: f64,
    column_means: Vec<f64>,
    covariance: Array2<f64>,
}

impl SurfaceCoefficient {
    pub fn q_domain(&self) -> (f64, f64) {
        self.basis_q.domain()
    }

    /// Centered surface value at (q, p); q outside the training domain is
    /// clamped into it.
    pub fn evaluate(&self, q: f64, p: f64) -> f64 {
        let bq = self.basis_q.eval_all(q);
        let bp = self.basis_p.eval_all(p);
        let l = self.basis_p.size();
        let mut acc = -self.offset;
        for (k, &bqv) in bq.iter().enumerate() {
            if bqv == 0.0 {
                continue;
            }
            for (li, &bpv) in bp.iter().enumerate() {
                acc += self.theta[k * l + li] * bqv * bpv;
            }
        }
        acc
    }

    /// Centered surface sampled on an n_q × n_p grid spanning the training
    /// q-domain and (0,1); returns (q points, p points, values[q][p]).
    pub fn sample(&self, n_q: usize, n_p: usize) -> (Vec<f64>, Vec<f64>, Array2<f64>) {
        let (lo, hi) = self.basis_q.domain();
        let qs: Vec<f64> = (0..n_q)
            .map(|i| lo + (hi - lo) * i as f64 / (n_q - 1).max(1) as f64)
            .collect();
        let ps: Vec<f64> = (0..n_p).map(|j| (j as f64 + 0.5) / n_p as f64).collect();
        let mut values = Array2::zeros((n_q, n_p));
        for (i, &q) in qs.iter().enumerate() {
            for (j, &p) in ps.iter().enumerate() {
                values[[i, j]] = self.evaluate(q, p);
            }
        }
        (qs, ps, values)
    }

    /// Fixed-p slice over the given q points, with pointwise bands that
    /// account for the centering offset.
    pub fn slice_at(&self, p: f64, q_points: &[f64]) -> FunctionalCoefficient {
        let l = self.basis_p.size();
        let bp = self.basis_p.eval_all(p);
        let mut estimate = Vec::with_capacity(q_points.len());
        let mut lower = Vec::with_capacity(q_points.len());
        let mut upper = Vec::with_capacity(q_points.len());
        for &q in q_points {
            let bq = self.basis_q.eval_all(q);
            // Contrast vector of the centered surface: b(q,p) − column means.
            let contrast: Vec<f64> = (0..self.theta.len())
                .map(|idx| bq[idx / l] * bp[idx % l] - self.column_means[idx])
                .collect();
            let est: f64 =
                contrast.iter().zip(&self.theta).map(|(c, t)| c * t).sum();
            let mut var = 0.0;
            for a in 0..contrast.len() {
                for b in 0..contrast.len() {
                    var += contrast[a] * self.covariance[[a, b]] * contrast[b];
                }
            }
            let half = 1.96 * var.max(0.0).sqrt();
            estimate.push(est);
            lower.push(est - half);
            upper.push(est + half);
        }
        FunctionalCoefficient { levels: q_points.to_vec(), estimate, lower, upper }
    }
}

#[derive(Debug, Clone)]
pub struct FgamOptions {
    pub grid: QuantileGrid,
    pub basis_q_size: usize,
    pub basis_p_size: usize,
    pub lambda_q: LambdaChoice,
    pub lambda_p: LambdaChoice,
    pub slice_levels: Vec<f64>,
}

impl Default for FgamOptions {
    fn default() -> Self {
        FgamOptions {
            grid: QuantileGrid::default(),
            basis_q_size: 7,
            basis_p_size: 7,
            lambda_q: LambdaChoice::Grid(log_lambda_grid(1e-6, 1e6, 11)),
            lambda_p: LambdaChoice::Grid(log_lambda_grid(1e-6, 1e6, 11)),
            slice_levels: vec![0.1, 0.25, 0.5, 0.75, 0.9],
        }
    }
}

/// Nonlinear quantile-effect fit:
/// g(μ_i) = α + Z_iᵀγ + ∫F(Q_i(p), p)dp.
#[derive(Debug)]
pub struct FgamFit {
    pub fit: PenalizedFit,
    pub surface: SurfaceCoefficient,
    pub slice_levels: Vec<f64>,
    feature: String,
    covariates: Vec<String>,
    grid: QuantileGrid,
}

impl FgamFit {
    pub fn feature(&self) -> &str {
        &self.feature
    }

    fn design_for(&self, dataset: &RepeatedMeasuresDataset) -> Result<Array2<f64>> {
        let unpenalized = scalar_design(dataset, &self.covariates)?;
        let qfs = dataset.quantile_functions(&self.feature, &self.grid)?;
        let n = dataset.n_subjects();
        let kl = self.surface.theta.len();
        let mut full = Array2::zeros((n, unpenalized.ncols() + kl));
        for i in 0..n {
            for j in 0..unpenalized.ncols() {
                full[[i, j]] = unpenalized[[i, j]];
            }
            let row = tensor_design_row(
                qfs[i].values(),
                &self.surface.basis_q,
                &self.surface.basis_p,
                &self.grid,
            )?;
            for (idx, v) in row.iter().enumerate() {
                full[[i, unpenalized.ncols() + idx]] = v - self.surface.column_means[idx];
            }
        }
        Ok(full)
    }

    pub fn linear_predictor(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_linear(&self.design_for(dataset)?)
    }

    pub fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_response(&self.design_for(dataset)?)
    }

    /// Fixed-p slices of the surface at the configured levels, each sampled
    /// at `n_q` equally spaced points across the training q-domain.
    pub fn slices(&self, n_q: usize) -> Vec<(f64, FunctionalCoefficient)> {
        let (lo, hi) = self.surface.q_domain();
        let q_points: Vec<f64> = (0..n_q)
            .map(|i| lo + (hi - lo) * i as f64 / (n_q - 1).max(1) as f64)
            .collect();
        self.slice_levels
            .iter()
            .map(|&p| (p, self.surface.slice_at(p, &q_points)))
            .collect()
    }
}

// Observed q-range across subjects, padded by 2% of the range per side so
// boundary evaluations stay inside the spline domain.
fn padded_q_domain(qfs: &[QuantileFunction]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for qf in qfs {
        for &v in qf.values() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("no finite values to set the q-domain".into()));
    }
    let pad = if hi > lo { 0.02 * (hi - lo) } else { 0.5 * (1.0 + lo.abs()) };
    Ok((lo - pad, hi + pad))
}

pub fn fit_fgam_qf(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    covariates: &[String],
    family: Family,
    options: &FgamOptions,
) -> Result<FgamFit> {
    let y = dataset.outcomes();
    let unpenalized = scalar_design(dataset, covariates)?;
    let qfs = dataset.quantile_functions(feature, &options.grid)?;
    let basis_q = SplineBasis::cubic(padded_q_domain(&qfs)?, options.basis_q_size)?;
    let basis_p = SplineBasis::cubic((0.0, 1.0), options.basis_p_size)?;
    let n = dataset.n_subjects();
    let kl = basis_q.size() * basis_p.size();
    let mut design = Array2::zeros((n, kl));
    for (i, qf) in qfs.iter().enumerate() {
        let row = tensor_design_row(qf.values(), &basis_q, &basis_p, &options.grid)?;
        for (idx, v) in row.iter().enumerate() {
            design[[i, idx]] = *v;
        }
    }
    // Identifiability: remove the column means so the functional term
    // averages to zero over training subjects; the intercept absorbs it.
    let column_means: Vec<f64> =
        (0..kl).map(|idx| design.column(idx).sum() / n as f64).collect();
    for idx in 0..kl {
        for i in 0..n {
            design[[i, idx]] -= column_means[idx];
        }
    }
    let pen_q = second_derivative_penalty(&basis_q);
    let pen_p = second_derivative_penalty(&basis_p);
    let eye_q = Array2::eye(basis_q.size());
    let eye_p = Array2::eye(basis_p.size());
    let spec = ModelSpec {
        family,
        unpenalized,
        blocks: vec![PenalizedBlock {
            label: FUNCTIONAL_BLOCK.into(),
            design,
            penalties: vec![kron(&pen_q, &eye_p), kron(&eye_q, &pen_p)],
        }],
    };
    let cand_q = options.lambda_q.candidates();
    let cand_p = options.lambda_p.candidates();
    let grids: Vec<Vec<f64>> = vec![
        cand_q.iter().map(|v| v[0]).collect(),
        cand_p.iter().map(|v| v[0]).collect(),
    ];
    let sel = select_lambda_gcv(&spec, &y, &cartesian_candidates(&grids))?;
    options.lambda_q.warn_if_on_edge(sel.fit.lambdas[0]);
    options.lambda_p.warn_if_on_edge(sel.fit.lambdas[1]);
    let fit = sel.fit;
    let range = fit.block_range(FUNCTIONAL_BLOCK).unwrap();
    let theta: Vec<f64> = fit.coefficients[range.clone()].to_vec();
    let offset: f64 = column_means.iter().zip(&theta).map(|(m, t)| m * t).sum();
    let mut covariance = Array2::zeros((kl, kl));
    for (a, ra) in range.clone().enumerate() {
        for (b, rb) in range.clone().enumerate() {
            covariance[[a, b]] = fit.covariance[[ra, rb]];
        }
    }
    let surface = SurfaceCoefficient {
        basis_q,
        basis_p,
        theta,
        offset,
        column_means,
        covariance,
    };
    Ok(FgamFit {
        fit,
        surface,
        slice_levels: options.slice_levels.clone(),
        feature: feature.to_string(),
        covariates: covariates.to_vec(),
        grid: options.grid.clone(),
    })
}

/// One fitted smooth component h_k(L_k), sampled across the observed range
/// of that L-moment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothComponent {
    pub name: String,
    pub curve: FunctionalCoefficient,
}

#[derive(Debug, Clone)]
pub struct GamLOptions {
    pub grid: QuantileGrid,
    pub order: usize,
    pub basis_size: usize,
    pub lambda_grid: Vec<f64>,
    pub max_cycles: usize,
}

impl Default for GamLOptions {
    fn default() -> Self {
        GamLOptions {
            grid: QuantileGrid::default(),
            order: 4,
            basis_size: 6,
            lambda_grid: default_lambda_grid(),
            max_cycles: 5,
        }
    }
}

/// Additive model on L-moment summaries:
/// g(μ_i) = α + Z_iᵀγ + Σ_k h_k(L_k(i)).
#[derive(Debug)]
pub struct GamLFit {
    pub fit: PenalizedFit,
    pub smooths: Vec<SmoothComponent>,
    feature: String,
    covariates: Vec<String>,
    grid: QuantileGrid,
    order: usize,
    bases: Vec<SplineBasis>,
    column_means: Vec<Vec<f64>>,
}

impl GamLFit {
    fn lmoment_matrix(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<Vec<f64>>> {
        lmoment_columns(dataset, &self.feature, self.order, &self.grid)
    }

    fn design_for(&self, dataset: &RepeatedMeasuresDataset) -> Result<Array2<f64>> {
        let unpenalized = scalar_design(dataset, &self.covariates)?;
        let columns = self.lmoment_matrix(dataset)?;
        let n = dataset.n_subjects();
        let width: usize = self.bases.iter().map(|b| b.size()).sum();
        let mut full = Array2::zeros((n, unpenalized.ncols() + width));
        for i in 0..n {
            for j in 0..unpenalized.ncols() {
                full[[i, j]] = unpenalized[[i, j]];
            }
            let mut offset = unpenalized.ncols();
            for (k, basis) in self.bases.iter().enumerate() {
                let vals = basis.eval_all(columns[k][i]);
                for (j, v) in vals.iter().enumerate() {
                    full[[i, offset + j]] = v - self.column_means[k][j];
                }
                offset += basis.size();
            }
        }
        Ok(full)
    }

    pub fn linear_predictor(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_linear(&self.design_for(dataset)?)
    }

    pub fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_response(&self.design_for(dataset)?)
    }
}

// Per-order L-moment columns (order columns, each of length n_subjects).
fn lmoment_columns(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    order: usize,
    grid: &QuantileGrid,
) -> Result<Vec<Vec<f64>>> {
    let qfs = dataset.quantile_functions(feature, grid)?;
    let mut columns = vec![Vec::with_capacity(qfs.len()); order];
    for qf in &qfs {
        let lm = lmoments_from_quantile(qf, order)?;
        for k in 0..order {
            columns[k].push(lm.values()[k]);
        }
    }
    Ok(columns)
}

fn smooth_block_label(k: usize) -> String {
    format!("smooth-L{}", k + 1)
}

pub fn fit_gam_lmoments(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    covariates: &[String],
    family: Family,
    options: &GamLOptions,
) -> Result<GamLFit> {
    if options.order == 0 {
        return Err(Error::InvalidArgument("L-moment order must be >= 1".into()));
    }
    let y = dataset.outcomes();
    let unpenalized = scalar_design(dataset, covariates)?;
    let columns = lmoment_columns(dataset, feature, options.order, &options.grid)?;
    let n = dataset.n_subjects();
    let mut bases = Vec::with_capacity(options.order);
    let mut column_means = Vec::with_capacity(options.order);
    let mut blocks = Vec::with_capacity(options.order);
    for (k, col) in columns.iter().enumerate() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            return Err(Error::DegenerateSmooth(format!(
                "degenerate smooth covariate {}",
                smooth_block_label(k)
            )));
        }
        let basis = SplineBasis::cubic((lo, hi), options.basis_size)?;
        let mut design = basis.design_matrix(col);
        let means: Vec<f64> =
            (0..basis.size()).map(|j| design.column(j).sum() / n as f64).collect();
        for j in 0..basis.size() {
            for i in 0..n {
                design[[i, j]] -= means[j];
            }
        }
        blocks.push(PenalizedBlock {
            label: smooth_block_label(k),
            design,
            penalties: vec![second_derivative_penalty(&basis)],
        });
        bases.push(basis);
        column_means.push(means);
    }
    let spec = ModelSpec { family, unpenalized, blocks };
    let grids: Vec<Vec<f64>> = (0..options.order).map(|_| options.lambda_grid.clone()).collect();
    let sel = select_lambda_coordinate(&spec, &y, &grids, options.max_cycles)?;
    let fit = sel.fit;
    let mut smooths = Vec::with_capacity(options.order);
    for (k, basis) in bases.iter().enumerate() {
        let (lo, hi) = basis.domain();
        let points: Vec<f64> =
            (0..100).map(|i| lo + (hi - lo) * i as f64 / 99.0).collect();
        let mut rows = basis.design_matrix(&points);
        for j in 0..basis.size() {
            for i in 0..points.len() {
                rows[[i, j]] -= column_means[k][j];
            }
        }
        let range = fit.block_range(&smooth_block_label(k)).unwrap();
        let band = pointwise_band(&fit, range, &rows)?;
        smooths.push(SmoothComponent {
            name: smooth_block_label(k),
            curve: FunctionalCoefficient::from_band(points, band),
        });
    }
    Ok(GamLFit {
        fit,
        smooths,
        feature: feature.to_string(),
        covariates: covariates.to_vec(),
        grid: options.grid.clone(),
        order: options.order,
        bases,
        column_means,
    })
}

/// Bin layout for the histogram-composition model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BinSpec {
    /// Explicit strictly increasing edges (length = bins + 1).
    Edges(Vec<f64>),
    /// `count` equal-width bins over [lo, hi].
    EqualWidth { lo: f64, hi: f64, count: usize },
    /// `count` equal-width bins over the observed range of the feature.
    Auto { count: usize },
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::Auto { count: 22 }
    }
}

fn equal_width_edges(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(hi > lo) {
        return Err(Error::InvalidDomain(format!("histogram range [{lo}, {hi}] is empty")));
    }
    if count < 2 {
        return Err(Error::InvalidArgument("need at least 2 histogram bins".into()));
    }
    Ok((0..=count).map(|i| lo + (hi - lo) * i as f64 / count as f64).collect())
}

impl BinSpec {
    fn resolve(&self, series: &[&[f64]]) -> Result<Vec<f64>> {
        match self {
            BinSpec::Edges(edges) => {
                if edges.len() < 3 {
                    return Err(Error::InvalidArgument(
                        "need at least 3 bin edges (2 bins)".into(),
                    ));
                }
                if edges.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidArgument(
                        "bin edges must be strictly increasing".into(),
                    ));
                }
                Ok(edges.clone())
            }
            BinSpec::EqualWidth { lo, hi, count } => equal_width_edges(*lo, *hi, *count),
            BinSpec::Auto { count } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for s in series {
                    for &v in *s {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if !(lo.is_finite() && hi.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "no observations to derive histogram bins from".into(),
                    ));
                }
                if hi <= lo {
                    hi = lo + 1.0;
                }
                equal_width_edges(lo, hi, *count)
            }
        }
    }
}

// Relative frequency vector over the bins; values outside the edge range
// are counted into the nearest end bin and reported back.
fn relative_frequencies(sample: &[f64], edges: &[f64]) -> (Vec<f64>, usize) {
    let n_bins = edges.len() - 1;
    let mut counts = vec![0.0; n_bins];
    let mut clamped = 0;
    for &v in sample {
        let idx = if v < edges[0] {
            clamped += 1;
            0
        } else if v >= edges[n_bins] {
            if v > edges[n_bins] {
                clamped += 1;
            }
            n_bins - 1
        } else {
            match edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
                Ok(i) => i.min(n_bins - 1),
                Err(i) => i - 1,
            }
        };
        counts[idx] += 1.0;
    }
    let total = sample.len() as f64;
    for c in &mut counts {
        *c /= total;
    }
    (counts, clamped)
}

#[derive(Debug, Clone)]
pub struct HistOptions {
    pub bins: BinSpec,
    /// Spline basis size for the bin-value effect; defaults to
    /// min(10, max(4, n_bins)) when absent.
    pub basis_size: Option<usize>,
    pub lambda: LambdaChoice,
}

impl Default for HistOptions {
    fn default() -> Self {
        HistOptions { bins: BinSpec::default(), basis_size: None, lambda: LambdaChoice::default() }
    }
}

/// Histogram-composition fit:
/// g(μ_i) = α + Z_iᵀγ + Σ_b π_ib f(x_b) over shared bins.
#[derive(Debug)]
pub struct HistFit {
    pub fit: PenalizedFit,
    /// f̂ at the bin midpoints with pointwise bands.
    pub effect: FunctionalCoefficient,
    pub edges: Vec<f64>,
    feature: String,
    covariates: Vec<String>,
    basis: SplineBasis,
    column_means: Vec<f64>,
}

impl HistFit {
    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    fn design_for(&self, dataset: &RepeatedMeasuresDataset) -> Result<Array2<f64>> {
        let unpenalized = scalar_design(dataset, &self.covariates)?;
        let series = dataset.observation_series(&self.feature)?;
        let mids = self.midpoints();
        let basis_at_mids = self.basis.design_matrix(&mids);
        let n = dataset.n_subjects();
        let size = self.basis.size();
        let mut full = Array2::zeros((n, unpenalized.ncols() + size));
        let mut clamped_total = 0;
        for i in 0..n {
            for j in 0..unpenalized.ncols() {
                full[[i, j]] = unpenalized[[i, j]];
            }
            let (freq, clamped) = relative_frequencies(series[i], &self.edges);
            clamped_total += clamped;
            for j in 0..size {
                let mut acc = 0.0;
                for (b, &f) in freq.iter().enumerate() {
                    acc += f * basis_at_mids[[b, j]];
                }
                full[[i, unpenalized.ncols() + j]] = acc - self.column_means[j];
            }
        }
        if clamped_total > 0 {
            log::warn!(
                "{clamped_total} observation(s) outside the histogram range were counted into the end bins"
            );
        }
        Ok(full)
    }

    pub fn linear_predictor(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_linear(&self.design_for(dataset)?)
    }

    pub fn predict(&self, dataset: &RepeatedMeasuresDataset) -> Result<Vec<f64>> {
        self.fit.predict_response(&self.design_for(dataset)?)
    }
}

pub fn fit_histogram_glm(
    dataset: &RepeatedMeasuresDataset,
    feature: &str,
    covariates: &[String],
    family: Family,
    options: &HistOptions,
) -> Result<HistFit> {
    let y = dataset.outcomes();
    let unpenalized = scalar_design(dataset, covariates)?;
    let series = dataset.observation_series(feature)?;
    for (s, record) in series.iter().zip(&dataset.subjects) {
        if s.is_empty() {
            return Err(Error::TooFewObservations {
                subject: record.subject_id.clone(),
                feature: feature.into(),
                n: 0,
            });
        }
    }
    let edges = options.bins.resolve(&series)?;
    let n_bins = edges.len() - 1;
    let mids: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let size = options.basis_size.unwrap_or_else(|| n_bins.clamp(4, 10));
    let basis = SplineBasis::cubic((mids[0], mids[n_bins - 1]), size)?;
    let basis_at_mids = basis.design_matrix(&mids);
    let n = dataset.n_subjects();
    let mut design = Array2::zeros((n, size));
    let mut clamped_total = 0;
    for i in 0..n {
        let (freq, clamped) = relative_frequencies(series[i], &edges);
        clamped_total += clamped;
        for j in 0..size {
            let mut acc = 0.0;
            for (b, &f) in freq.iter().enumerate() {
                acc += f * basis_at_mids[[b, j]];
            }
            design[[i, j]] = acc;
        }
    }
    if clamped_total > 0 {
        log::warn!(
            "{clamped_total} observation(s) outside the histogram range were counted into the end bins"
        );
    }
    // Compositions sum to one, so a constant f is confounded with the
    // intercept; center the penalized columns to restore identifiability.
    let column_means: Vec<f64> =
        (0..size).map(|j| design.column(j).sum() / n as f64).collect();
    for j in 0..size {
        for i in 0..n {
            design[[i, j]] -= column_means[j];
        }
    }
    let spec = ModelSpec {
        family,
        unpenalized,
        blocks: vec![PenalizedBlock {
            label: FUNCTIONAL_BLOCK.into(),
            design,
            penalties: vec![second_derivative_penalty(&basis)],
        }],
    };
    let fit = match &options.lambda {
        LambdaChoice::Fixed(l) => fit_pirls(&spec, &y, &[*l])?,
        choice @ LambdaChoice::Grid(_) => {
            let sel = select_lambda_gcv(&spec, &y, &choice.candidates())?;
            choice.warn_if_on_edge(sel.fit.lambdas[0]);
            sel.fit
        }
    };
    let range = fit.block_range(FUNCTIONAL_BLOCK).unwrap();
    let mut rows = basis_at_mids;
    for j in 0..size {
        for b in 0..n_bins {
            rows[[b, j]] -= column_means[j];
        }
    }
    let band = pointwise_band(&fit, range, &rows)?;
    let effect = FunctionalCoefficient::from_band(mids, band);
    Ok(HistFit {
        fit,
        effect,
        edges,
        feature: feature.to_string(),
        covariates: covariates.to_vec(),
        basis,
        column_means,
    })
}
