//! Serializable summaries of fitted models and decompositions, written as
//! the JSON half of each subcommand's artifacts.

use ndarray::Array2;
use serde::Serialize;

use qdist::jive::{BlockVariance, NormalizationRecord};
use qdist::soqfr::SmoothComponent;
use qdist::{
    Family, FgamFit, FunctionalCoefficient, GamLFit, HistFit, JiveDecomposition, PenalizedFit,
    SoqfrFit, SoqfrLFit,
};

pub fn family_name(family: Family) -> &'static str {
    match family {
        Family::Gaussian => "gaussian",
        Family::Binomial => "binomial",
    }
}

/// The part every regression summary shares: coefficients with Wald
/// p-values, deviance accounting, and the smoothing state.
#[derive(Serialize)]
pub struct FitCore {
    pub model: &'static str,
    pub family: &'static str,
    pub feature: String,
    pub covariates: Vec<String>,
    pub n_subjects: usize,
    pub coefficients: Vec<f64>,
    pub p_values: Vec<Option<f64>>,
    pub deviance_explained: Option<f64>,
    pub deviance: f64,
    pub null_deviance: f64,
    pub lambdas: Vec<f64>,
    pub edf: f64,
    pub gcv: f64,
    pub iterations: usize,
}

fn fit_core(
    model: &'static str,
    feature: &str,
    covariates: &[String],
    fit: &PenalizedFit,
) -> FitCore {
    FitCore {
        model,
        family: family_name(fit.family),
        feature: feature.into(),
        covariates: covariates.to_vec(),
        n_subjects: fit.n_obs,
        coefficients: fit.coefficients.clone(),
        p_values: (0..fit.coefficients.len()).map(|i| fit.coefficient_p_value(i)).collect(),
        deviance_explained: fit.deviance_explained().ok(),
        deviance: fit.deviance,
        null_deviance: fit.null_deviance,
        lambdas: fit.lambdas.clone(),
        edf: fit.edf,
        gcv: fit.gcv,
        iterations: fit.iterations,
    }
}

#[derive(Serialize)]
pub struct SoqfrSummary {
    #[serde(flatten)]
    pub core: FitCore,
    pub basis: String,
    pub basis_size: usize,
    pub beta: FunctionalCoefficient,
}

pub fn soqfr_summary(
    fit: &SoqfrFit,
    covariates: &[String],
    basis: &str,
    basis_size: usize,
) -> SoqfrSummary {
    SoqfrSummary {
        core: fit_core("soqfr", fit.feature(), covariates, &fit.fit),
        basis: basis.into(),
        basis_size,
        beta: fit.beta.clone(),
    }
}

#[derive(Serialize)]
pub struct SoqfrLSummary {
    #[serde(flatten)]
    pub core: FitCore,
    pub order: usize,
    pub lmoment_p_values: Vec<Option<f64>>,
    pub beta: FunctionalCoefficient,
}

pub fn soqfr_l_summary(fit: &SoqfrLFit, feature: &str, covariates: &[String], order: usize) -> SoqfrLSummary {
    SoqfrLSummary {
        core: fit_core("soqfr-l", feature, covariates, &fit.fit),
        order,
        lmoment_p_values: fit.lmoment_p_values.clone(),
        beta: fit.beta.clone(),
    }
}

#[derive(Serialize)]
pub struct SurfaceSample {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Row i holds the surface over p at q[i].
    pub values: Vec<Vec<f64>>,
}

pub fn surface_sample(qs: Vec<f64>, ps: Vec<f64>, values: &Array2<f64>) -> SurfaceSample {
    SurfaceSample {
        q: qs,
        p: ps,
        values: (0..values.nrows()).map(|i| values.row(i).to_vec()).collect(),
    }
}

#[derive(Serialize)]
pub struct SliceSummary {
    pub p: f64,
    pub curve: FunctionalCoefficient,
}

#[derive(Serialize)]
pub struct FgamSummary {
    #[serde(flatten)]
    pub core: FitCore,
    pub basis_q_size: usize,
    pub basis_p_size: usize,
    pub surface: SurfaceSample,
    pub slices: Vec<SliceSummary>,
}

pub fn fgam_summary(
    fit: &FgamFit,
    covariates: &[String],
    basis_q_size: usize,
    basis_p_size: usize,
    surface: SurfaceSample,
    slices: Vec<SliceSummary>,
) -> FgamSummary {
    FgamSummary {
        core: fit_core("fgam", fit.feature(), covariates, &fit.fit),
        basis_q_size,
        basis_p_size,
        surface,
        slices,
    }
}

#[derive(Serialize)]
pub struct GamLSummary {
    #[serde(flatten)]
    pub core: FitCore,
    pub order: usize,
    pub basis_size: usize,
    pub smooths: Vec<SmoothComponent>,
}

pub fn gam_l_summary(
    fit: &GamLFit,
    feature: &str,
    covariates: &[String],
    order: usize,
    basis_size: usize,
) -> GamLSummary {
    GamLSummary {
        core: fit_core("gam-l", feature, covariates, &fit.fit),
        order,
        basis_size,
        smooths: fit.smooths.clone(),
    }
}

#[derive(Serialize)]
pub struct HistSummary {
    #[serde(flatten)]
    pub core: FitCore,
    pub edges: Vec<f64>,
    pub effect: FunctionalCoefficient,
}

pub fn hist_summary(fit: &HistFit, feature: &str, covariates: &[String]) -> HistSummary {
    HistSummary {
        core: fit_core("hist", feature, covariates, &fit.fit),
        edges: fit.edges.clone(),
        effect: fit.effect.clone(),
    }
}

#[derive(Serialize)]
pub struct RankSelectionSummary {
    pub alpha: f64,
    pub permutations: usize,
}

#[derive(Serialize)]
pub struct JiveSummary {
    pub domains: Vec<String>,
    pub n_subjects: usize,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    pub variance: Vec<BlockVariance>,
    pub converged: bool,
    pub iterations: usize,
    pub normalization: NormalizationRecord,
    pub rank_selection: Option<RankSelectionSummary>,
}

pub fn jive_summary(
    decomp: &JiveDecomposition,
    normalization: NormalizationRecord,
    rank_selection: Option<RankSelectionSummary>,
) -> JiveSummary {
    JiveSummary {
        domains: decomp.domains.clone(),
        n_subjects: decomp.n_subjects(),
        joint_rank: decomp.joint_rank,
        individual_ranks: decomp.individual_ranks.clone(),
        variance: decomp.variance.clone(),
        converged: decomp.converged,
        iterations: decomp.iterations,
        normalization,
        rank_selection,
    }
}
