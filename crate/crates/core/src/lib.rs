//! Distribution-valued data analysis: subject-level samples become
//! quantile functions on a shared probability grid, which feed summary
//! statistics (L-moments, Wasserstein geometry), scalar-on-distribution
//! regression models, and multi-block joint/individual decompositions.

pub mod error;
pub mod lmoments;
pub mod quantiles;
pub mod splines;

pub mod evaluate;
pub mod io;
pub mod jive;
mod linalg;
pub mod pglm;
pub mod simulate;
pub mod soqfr;
pub(crate) mod util;

pub use error::{Error, Result};
pub use evaluate::{
    auc, cross_validate, cross_validate_with_hook, cv_r2, deviance_explained_report,
    fold_assignments, CvPlan, FgamRecipe, FittedModel, GamLRecipe, HistRecipe, MetricKind,
    MetricReport, ModelRecipe, Prediction, SoqfrLRecipe, SoqfrRecipe,
};
pub use jive::{
    jive_decompose, lmoment_blocks, normalize_blocks, score_cross_correlation,
    select_ranks_permutation, DomainBlock, JiveDecomposition, RankSelection,
};
pub use lmoments::{LMomentVector, LegendreBasis, PveProfile, MAX_LEGENDRE_DEGREE};
pub use pglm::{Family, PenalizedFit};
pub use quantiles::{
    OutcomeType, QuantileFunction, QuantileGrid, RepeatedMeasuresDataset, SubjectRecord,
};
pub use simulate::{
    generate, population_grid, BetaCurve, FeatureSpec, GroundTruth, Mechanism, OutcomeLaw,
    ParamLaw, ScenarioSpec, SubjectFamily,
};
pub use soqfr::{
    fit_fgam_qf, fit_gam_lmoments, fit_histogram_glm, fit_soqfr, fit_soqfr_l, BinSpec,
    FgamFit, FgamOptions, FunctionalCoefficient, GamLFit, GamLOptions, HistFit, HistOptions,
    LambdaChoice, SoqfrBasis, SoqfrFit, SoqfrLFit, SoqfrOptions,
};
pub use splines::{PenaltyMatrix, SplineBasis};
