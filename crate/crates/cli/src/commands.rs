//! Subcommand implementations. Every command follows the same shape:
//! merge flags over the configuration file, read and validate all inputs
//! up front, compute, write the artifacts, then pin the effective
//! configuration in `run_manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use qdist::io::{
    read_dataset, read_json, write_curve, write_curve_as, write_dataset, write_json,
    write_jive_loadings, write_jive_scores, write_labeled_curves, write_lmoment_table,
    write_metric_reports, write_quantile_table, write_score_correlations, write_surface,
};
use qdist::lmoments::{lmoments_from_quantile, lmoments_sample};
use qdist::pglm::log_lambda_grid;
use qdist::{
    cross_validate, fit_fgam_qf, fit_gam_lmoments, fit_histogram_glm, fit_soqfr, fit_soqfr_l,
    jive_decompose, lmoment_blocks, normalize_blocks, score_cross_correlation,
    select_ranks_permutation, BinSpec, CvPlan, Family, FeatureSpec, FgamOptions, FgamRecipe,
    FunctionalCoefficient, GamLOptions, GamLRecipe, HistOptions, HistRecipe, LambdaChoice,
    Mechanism, ModelRecipe, OutcomeLaw, OutcomeType, ParamLaw, QuantileGrid,
    RepeatedMeasuresDataset, ScenarioSpec, SoqfrBasis, SoqfrLRecipe, SoqfrOptions, SoqfrRecipe,
    SubjectFamily,
};

use crate::config::Resolved;
use crate::summaries::{self, RankSelectionSummary, SliceSummary};
use crate::{usage, Cli, CliResult, Cmd, Failure, InputArgs, ModelArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Wall-clock phase durations recorded into the manifest.
struct Timer {
    start: Instant,
    last: Instant,
    marks: BTreeMap<String, u64>,
}

impl Timer {
    fn new() -> Self {
        let now = Instant::now();
        Timer { start: now, last: now, marks: BTreeMap::new() }
    }

    fn mark(&mut self, phase: &str) {
        let now = Instant::now();
        self.marks
            .insert(format!("{phase}_ms"), now.duration_since(self.last).as_millis() as u64);
        self.last = now;
    }

    fn finish(mut self) -> BTreeMap<String, u64> {
        self.marks.insert("total_ms".into(), self.start.elapsed().as_millis() as u64);
        self.marks
    }
}

#[derive(Serialize)]
struct Manifest {
    config: BTreeMap<String, Value>,
    seed: u64,
    versions: BTreeMap<String, String>,
    timings: BTreeMap<String, u64>,
}

fn write_manifest(out: &Path, cfg: Resolved, seed: u64, timer: Timer) -> CliResult<()> {
    let manifest = Manifest {
        config: cfg.into_map(),
        seed,
        versions: BTreeMap::from([
            ("qdist".to_string(), VERSION.to_string()),
            ("qdist-cli".to_string(), VERSION.to_string()),
        ]),
        timings: timer.finish(),
    };
    write_json(&out.join("run_manifest.json"), &manifest).map_err(Failure::Core)
}

fn out_dir(cfg: &mut Resolved) -> CliResult<PathBuf> {
    let dir = PathBuf::from(cfg.str_or("out", ".")?);
    std::fs::create_dir_all(&dir).map_err(|e| {
        Failure::Core(qdist::Error::Io { path: dir.display().to_string(), source: e })
    })?;
    Ok(dir)
}

fn set_input_flags(cfg: &mut Resolved, input: InputArgs) {
    cfg.set_path("observations", input.observations);
    cfg.set_path("subjects", input.subjects);
    cfg.set_path("domains", input.domains);
}

fn set_model_flags(cfg: &mut Resolved, model: ModelArgs) {
    cfg.set_str("feature", model.feature);
    cfg.set_str("covariates", model.covariates);
    cfg.set_str("family", model.family);
}

fn read_inputs(cfg: &Resolved) -> CliResult<RepeatedMeasuresDataset> {
    let observations = cfg.require_path("observations", "--observations")?;
    let subjects = cfg.require_path("subjects", "--subjects")?;
    let domains = cfg.opt_path("domains")?;
    Ok(read_dataset(&observations, &subjects, domains.as_deref())?)
}

fn resolve_grid(cfg: &mut Resolved) -> CliResult<QuantileGrid> {
    let m = cfg.usize_or("grid.points", 100)?;
    Ok(QuantileGrid::midpoint(m)?)
}

fn resolve_family(cfg: &mut Resolved, dataset: &RepeatedMeasuresDataset) -> CliResult<Family> {
    let name = cfg.str_or("family", "auto")?;
    let family = match name.as_str() {
        "auto" => match dataset.outcome_type() {
            OutcomeType::Binary => Family::Binomial,
            OutcomeType::Continuous => Family::Gaussian,
        },
        "gaussian" => Family::Gaussian,
        "binomial" => Family::Binomial,
        other => {
            return Err(usage(format!(
                "unknown family `{other}`; expected auto, gaussian, or binomial"
            )))
        }
    };
    cfg.record_str("family", summaries::family_name(family));
    Ok(family)
}

fn resolve_feature(cfg: &mut Resolved, dataset: &RepeatedMeasuresDataset) -> CliResult<String> {
    let available = dataset.feature_ids();
    if let Some(feature) = cfg.opt_str("feature")? {
        if !available.contains(&feature) {
            return Err(usage(format!(
                "feature `{feature}` is not in the dataset (available: {})",
                available.join(", ")
            )));
        }
        return Ok(feature);
    }
    if available.len() == 1 {
        cfg.record_str("feature", &available[0]);
        return Ok(available[0].clone());
    }
    Err(usage(format!(
        "--feature is required when the dataset has several (available: {})",
        available.join(", ")
    )))
}

fn resolve_covariates(
    cfg: &mut Resolved,
    dataset: &RepeatedMeasuresDataset,
) -> CliResult<Vec<String>> {
    match cfg.opt_str("covariates")? {
        Some(list) => {
            let names: Vec<String> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            for name in &names {
                if !dataset.covariate_names.contains(name) {
                    return Err(Failure::Core(qdist::Error::UnknownCovariate(name.clone())));
                }
            }
            cfg.record_str("covariates", &names.join(","));
            Ok(names)
        }
        None => {
            let all = dataset.covariate_names.clone();
            cfg.record_str("covariates", &all.join(","));
            Ok(all)
        }
    }
}

// Smoothing choice for a single-penalty model: a fixed `<prefix>.lambda`
// wins, otherwise a log-spaced GCV grid from the `<prefix>.lambda_*` keys.
fn resolve_lambda(cfg: &mut Resolved, prefix: &str, default_count: usize) -> CliResult<LambdaChoice> {
    if let Some(l) = cfg.opt_f64(&format!("{prefix}.lambda"))? {
        if l < 0.0 {
            return Err(Failure::Core(qdist::Error::NegativeLambda(l)));
        }
        return Ok(LambdaChoice::Fixed(l));
    }
    let lo = cfg.f64_or(&format!("{prefix}.lambda_lo"), 1e-6)?;
    let hi = cfg.f64_or(&format!("{prefix}.lambda_hi"), 1e6)?;
    let count = cfg.usize_or(&format!("{prefix}.lambda_count"), default_count)?;
    if !(lo > 0.0 && hi >= lo) || count < 1 {
        return Err(usage(format!(
            "invalid smoothing grid for `{prefix}`: need 0 < lambda_lo <= lambda_hi and count >= 1"
        )));
    }
    Ok(LambdaChoice::Grid(log_lambda_grid(lo, hi, count)))
}

fn resolve_soqfr_options(
    cfg: &mut Resolved,
    grid: &QuantileGrid,
) -> CliResult<(SoqfrOptions, String, usize)> {
    let basis_name = cfg.str_or("soqfr.basis", "spline")?;
    let size = cfg.usize_or("soqfr.basis_size", 10)?;
    let basis = match basis_name.as_str() {
        "spline" => SoqfrBasis::Spline { size },
        "legendre" => SoqfrBasis::Legendre { size },
        other => {
            return Err(usage(format!(
                "unknown soqfr basis `{other}`; expected spline or legendre"
            )))
        }
    };
    let lambda = resolve_lambda(cfg, "soqfr", 41)?;
    Ok((SoqfrOptions { grid: grid.clone(), basis, lambda }, basis_name, size))
}

fn resolve_fgam_options(cfg: &mut Resolved, grid: &QuantileGrid) -> CliResult<FgamOptions> {
    let basis_q_size = cfg.usize_or("fgam.basis_q_size", 7)?;
    let basis_p_size = cfg.usize_or("fgam.basis_p_size", 7)?;
    let lo = cfg.f64_or("fgam.lambda_lo", 1e-6)?;
    let hi = cfg.f64_or("fgam.lambda_hi", 1e6)?;
    let count = cfg.usize_or("fgam.lambda_count", 11)?;
    if !(lo > 0.0 && hi >= lo) || count < 1 {
        return Err(usage(
            "invalid smoothing grid for `fgam`: need 0 < lambda_lo <= lambda_hi and count >= 1",
        ));
    }
    let lambda_grid = log_lambda_grid(lo, hi, count);
    let slices_text = cfg.str_or("fgam.slices", "0.1,0.25,0.5,0.75,0.9")?;
    let mut slice_levels = Vec::new();
    for part in slices_text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p: f64 = part
            .parse()
            .map_err(|_| usage(format!("fgam.slices entry `{part}` is not a number")))?;
        if !(p > 0.0 && p < 1.0) {
            return Err(usage(format!("fgam.slices entry {p} must lie strictly inside (0, 1)")));
        }
        slice_levels.push(p);
    }
    Ok(FgamOptions {
        grid: grid.clone(),
        basis_q_size,
        basis_p_size,
        lambda_q: LambdaChoice::Grid(lambda_grid.clone()),
        lambda_p: LambdaChoice::Grid(lambda_grid),
        slice_levels,
    })
}

fn resolve_gam_l_options(cfg: &mut Resolved, grid: &QuantileGrid) -> CliResult<GamLOptions> {
    Ok(GamLOptions {
        grid: grid.clone(),
        order: cfg.usize_or("gam_l.order", 4)?,
        basis_size: cfg.usize_or("gam_l.basis_size", 6)?,
        ..GamLOptions::default()
    })
}

fn resolve_hist_options(cfg: &mut Resolved) -> CliResult<HistOptions> {
    let count = cfg.usize_or("hist.bins", 22)?;
    let range = cfg.str_or("hist.bin_range", "auto")?;
    let bins = if range == "auto" {
        BinSpec::Auto { count }
    } else {
        let (lo, hi) = range
            .split_once(':')
            .ok_or_else(|| usage("hist.bin_range must be `auto` or `lo:hi`"))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| usage(format!("hist.bin_range lower bound `{lo}` is not a number")))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| usage(format!("hist.bin_range upper bound `{hi}` is not a number")))?;
        BinSpec::EqualWidth { lo, hi, count }
    };
    let basis_size = cfg.opt_usize("hist.basis_size")?;
    let lambda = match cfg.opt_f64("hist.lambda")? {
        Some(l) if l < 0.0 => return Err(Failure::Core(qdist::Error::NegativeLambda(l))),
        Some(l) => LambdaChoice::Fixed(l),
        None => LambdaChoice::default(),
    };
    Ok(HistOptions { bins, basis_size, lambda })
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = Resolved::load(cli.config.as_deref())?;
    cfg.set_path("out", cli.out);
    cfg.set_u64("seed", cli.seed);
    let timer = Timer::new();
    match cli.command {
        Cmd::Quantiles { input, grid_points } => quantiles_cmd(cfg, timer, input, grid_points),
        Cmd::Lmoments { input, order, method, grid_points } => {
            lmoments_cmd(cfg, timer, input, order, method, grid_points)
        }
        Cmd::FitSoqfr {
            input,
            model,
            grid_points,
            basis,
            basis_size,
            lambda,
            lambda_lo,
            lambda_hi,
            lambda_count,
        } => {
            cfg.set_str("soqfr.basis", basis);
            cfg.set_usize("soqfr.basis_size", basis_size);
            cfg.set_f64("soqfr.lambda", lambda);
            cfg.set_f64("soqfr.lambda_lo", lambda_lo);
            cfg.set_f64("soqfr.lambda_hi", lambda_hi);
            cfg.set_usize("soqfr.lambda_count", lambda_count);
            fit_soqfr_cmd(cfg, timer, input, model, grid_points)
        }
        Cmd::FitFgam {
            input,
            model,
            grid_points,
            basis_q_size,
            basis_p_size,
            lambda_lo,
            lambda_hi,
            lambda_count,
            slices,
        } => {
            cfg.set_usize("fgam.basis_q_size", basis_q_size);
            cfg.set_usize("fgam.basis_p_size", basis_p_size);
            cfg.set_f64("fgam.lambda_lo", lambda_lo);
            cfg.set_f64("fgam.lambda_hi", lambda_hi);
            cfg.set_usize("fgam.lambda_count", lambda_count);
            cfg.set_str("fgam.slices", slices);
            fit_fgam_cmd(cfg, timer, input, model, grid_points)
        }
        Cmd::FitSoqfrL { input, model, grid_points, order } => {
            cfg.set_usize("soqfr_l.order", order);
            fit_soqfr_l_cmd(cfg, timer, input, model, grid_points)
        }
        Cmd::FitGamL { input, model, grid_points, order, basis_size } => {
            cfg.set_usize("gam_l.order", order);
            cfg.set_usize("gam_l.basis_size", basis_size);
            fit_gam_l_cmd(cfg, timer, input, model, grid_points)
        }
        Cmd::FitHist { input, model, bins, bin_range, basis_size, lambda } => {
            cfg.set_usize("hist.bins", bins);
            cfg.set_str("hist.bin_range", bin_range);
            cfg.set_usize("hist.basis_size", basis_size);
            cfg.set_f64("hist.lambda", lambda);
            fit_hist_cmd(cfg, timer, input, model)
        }
        Cmd::Jive {
            input,
            order,
            grid_points,
            joint_rank,
            individual_ranks,
            permutations,
            alpha,
        } => {
            cfg.set_usize("jive.order", order);
            cfg.set_usize("jive.joint_rank", joint_rank);
            cfg.set_str("jive.individual_ranks", individual_ranks);
            cfg.set_usize("jive.permutations", permutations);
            cfg.set_f64("jive.alpha", alpha);
            jive_cmd(cfg, timer, input, grid_points)
        }
        Cmd::Cv { input, model, grid_points, k, repeats, models } => {
            cfg.set_usize("cv.k", k);
            cfg.set_usize("cv.repeats", repeats);
            cfg.set_str("cv.models", models);
            cv_cmd(cfg, timer, input, model, grid_points)
        }
        Cmd::Simulate { scenario, n_subjects } => {
            cfg.set_path("simulate.scenario", scenario);
            cfg.set_usize("simulate.subjects", n_subjects);
            simulate_cmd(cfg, timer)
        }
    }
}

fn quantiles_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "quantiles");
    set_input_flags(&mut cfg, input);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let grid = resolve_grid(&mut cfg)?;
    let mut curves = Vec::new();
    for feature in dataset.feature_ids() {
        curves.extend(dataset.quantile_functions(&feature, &grid)?);
    }
    timer.mark("compute");
    write_quantile_table(&out.join("quantiles.csv"), &curves)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn lmoments_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    order: Option<usize>,
    method: Option<String>,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "lmoments");
    set_input_flags(&mut cfg, input);
    cfg.set_usize("lmoments.order", order);
    cfg.set_str("lmoments.method", method);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let order = cfg.usize_or("lmoments.order", 4)?;
    let method = cfg.str_or("lmoments.method", "sample")?;
    let mut rows = Vec::new();
    match method.as_str() {
        "sample" => {
            for feature in dataset.feature_ids() {
                let series = dataset.observation_series(&feature)?;
                for (sample, subject) in series.iter().zip(&dataset.subjects) {
                    rows.push(
                        lmoments_sample(sample, order)?
                            .with_ids(&subject.subject_id, &feature),
                    );
                }
            }
        }
        "projection" => {
            let grid = resolve_grid(&mut cfg)?;
            for feature in dataset.feature_ids() {
                for qf in dataset.quantile_functions(&feature, &grid)? {
                    rows.push(
                        lmoments_from_quantile(&qf, order)?
                            .with_ids(&qf.subject_id, &qf.feature_id),
                    );
                }
            }
        }
        other => {
            return Err(usage(format!(
                "unknown lmoments method `{other}`; expected sample or projection"
            )))
        }
    }
    timer.mark("compute");
    write_lmoment_table(&out.join("lmoments.csv"), &rows)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn fit_soqfr_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "fit-soqfr");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let grid = resolve_grid(&mut cfg)?;
    let (options, basis_name, basis_size) = resolve_soqfr_options(&mut cfg, &grid)?;
    let fit = fit_soqfr(&dataset, &feature, &covariates, family, &options)?;
    timer.mark("fit");
    write_json(
        &out.join("soqfr_fit.json"),
        &summaries::soqfr_summary(&fit, &covariates, &basis_name, basis_size),
    )?;
    write_curve(&out.join("soqfr_beta.csv"), &fit.beta)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn fit_fgam_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "fit-fgam");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let grid = resolve_grid(&mut cfg)?;
    let options = resolve_fgam_options(&mut cfg, &grid)?;
    let fit = fit_fgam_qf(&dataset, &feature, &covariates, family, &options)?;
    timer.mark("fit");
    let (qs, ps, values) = fit.surface.sample(40, 25);
    let slices = fit.slices(101);
    write_json(
        &out.join("fgam_fit.json"),
        &summaries::fgam_summary(
            &fit,
            &covariates,
            options.basis_q_size,
            options.basis_p_size,
            summaries::surface_sample(qs.clone(), ps.clone(), &values),
            slices
                .iter()
                .map(|(p, curve)| SliceSummary { p: *p, curve: curve.clone() })
                .collect(),
        ),
    )?;
    write_surface(&out.join("fgam_surface.csv"), &qs, &ps, &values)?;
    let labeled: Vec<(String, FunctionalCoefficient)> =
        slices.into_iter().map(|(p, curve)| (format!("{p}"), curve)).collect();
    write_labeled_curves(&out.join("fgam_slices.csv"), "p", "q", &labeled)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn fit_soqfr_l_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "fit-soqfr-l");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let grid = resolve_grid(&mut cfg)?;
    let order = cfg.usize_or("soqfr_l.order", 4)?;
    let fit = fit_soqfr_l(&dataset, &feature, &covariates, family, order, &grid)?;
    timer.mark("fit");
    write_json(
        &out.join("soqfr_l_fit.json"),
        &summaries::soqfr_l_summary(&fit, &feature, &covariates, order),
    )?;
    write_curve(&out.join("soqfr_l_beta.csv"), &fit.beta)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn fit_gam_l_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "fit-gam-l");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let grid = resolve_grid(&mut cfg)?;
    let options = resolve_gam_l_options(&mut cfg, &grid)?;
    let fit = fit_gam_lmoments(&dataset, &feature, &covariates, family, &options)?;
    timer.mark("fit");
    write_json(
        &out.join("gam_l_fit.json"),
        &summaries::gam_l_summary(&fit, &feature, &covariates, options.order, options.basis_size),
    )?;
    let labeled: Vec<(String, FunctionalCoefficient)> =
        fit.smooths.iter().map(|s| (s.name.clone(), s.curve.clone())).collect();
    write_labeled_curves(&out.join("gam_l_smooths.csv"), "smooth", "x", &labeled)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn fit_hist_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
) -> CliResult<()> {
    cfg.record_str("command", "fit-hist");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let options = resolve_hist_options(&mut cfg)?;
    let fit = fit_histogram_glm(&dataset, &feature, &covariates, family, &options)?;
    timer.mark("fit");
    write_json(&out.join("hist_fit.json"), &summaries::hist_summary(&fit, &feature, &covariates))?;
    write_curve_as(&out.join("hist_effect.csv"), "x", &fit.effect)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn jive_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "jive");
    set_input_flags(&mut cfg, input);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let order = cfg.usize_or("jive.order", 4)?;
    let grid = resolve_grid(&mut cfg)?;
    let blocks = lmoment_blocks(&dataset, order, &grid)?;
    let (normalized, record) = normalize_blocks(&blocks)?;
    let (joint_rank, individual_ranks, selection) = match cfg.opt_usize("jive.joint_rank")? {
        Some(joint) => {
            let text = cfg.opt_str("jive.individual_ranks")?.ok_or_else(|| {
                usage("jive.joint_rank also needs jive.individual_ranks (one per domain)")
            })?;
            let mut ranks = Vec::new();
            for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                ranks.push(part.parse::<usize>().map_err(|_| {
                    usage(format!("jive.individual_ranks entry `{part}` is not an integer"))
                })?);
            }
            if ranks.len() != normalized.len() {
                return Err(usage(format!(
                    "jive.individual_ranks lists {} ranks but the dataset has {} domains",
                    ranks.len(),
                    normalized.len()
                )));
            }
            (joint, ranks, None)
        }
        None => {
            let n_perm = cfg.usize_or("jive.permutations", 100)?;
            let alpha = cfg.f64_or("jive.alpha", 0.05)?;
            let sel = select_ranks_permutation(&normalized, alpha, n_perm, seed)?;
            (
                sel.joint,
                sel.individual,
                Some(RankSelectionSummary { alpha, permutations: n_perm }),
            )
        }
    };
    let decomp = jive_decompose(&normalized, joint_rank, &individual_ranks)?;
    let correlations = score_cross_correlation(&decomp, &normalized)?;
    timer.mark("compute");
    let subject_ids: Vec<String> =
        dataset.subjects.iter().map(|s| s.subject_id.clone()).collect();
    write_json(
        &out.join("jive_summary.json"),
        &summaries::jive_summary(&decomp, record, selection),
    )?;
    write_jive_scores(&out.join("jive_scores.csv"), &decomp, &subject_ids)?;
    write_jive_loadings(&out.join("jive_loadings.csv"), &decomp)?;
    write_score_correlations(&out.join("jive_cross_correlation.csv"), &correlations)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

fn build_recipe(
    cfg: &mut Resolved,
    name: &str,
    feature: &str,
    covariates: &[String],
    family: Family,
    grid: &QuantileGrid,
) -> CliResult<Box<dyn ModelRecipe>> {
    let feature = feature.to_string();
    let covariates = covariates.to_vec();
    Ok(match name {
        "soqfr" => {
            let (options, _, _) = resolve_soqfr_options(cfg, grid)?;
            Box::new(SoqfrRecipe { feature, covariates, family, options })
        }
        "soqfr-l" => Box::new(SoqfrLRecipe {
            feature,
            covariates,
            family,
            order: cfg.usize_or("soqfr_l.order", 4)?,
            grid: grid.clone(),
        }),
        "fgam" => {
            let options = resolve_fgam_options(cfg, grid)?;
            Box::new(FgamRecipe { feature, covariates, family, options })
        }
        "gam-l" => {
            let options = resolve_gam_l_options(cfg, grid)?;
            Box::new(GamLRecipe { feature, covariates, family, options })
        }
        "hist" => {
            let options = resolve_hist_options(cfg)?;
            Box::new(HistRecipe { feature, covariates, family, options })
        }
        other => {
            return Err(usage(format!(
                "unknown model `{other}`; expected soqfr, soqfr-l, fgam, gam-l, or hist"
            )))
        }
    })
}

fn cv_cmd(
    mut cfg: Resolved,
    mut timer: Timer,
    input: InputArgs,
    model: ModelArgs,
    grid_points: Option<usize>,
) -> CliResult<()> {
    cfg.record_str("command", "cv");
    set_input_flags(&mut cfg, input);
    set_model_flags(&mut cfg, model);
    cfg.set_usize("grid.points", grid_points);
    let out = out_dir(&mut cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let dataset = read_inputs(&cfg)?;
    timer.mark("read");
    let family = resolve_family(&mut cfg, &dataset)?;
    let feature = resolve_feature(&mut cfg, &dataset)?;
    let covariates = resolve_covariates(&mut cfg, &dataset)?;
    let grid = resolve_grid(&mut cfg)?;
    let k = cfg.usize_or("cv.k", 10)?;
    let repeats = cfg.usize_or("cv.repeats", 100)?;
    let models = cfg.str_or("cv.models", "soqfr,soqfr-l,fgam,gam-l,hist")?;
    let names: Vec<String> = models
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(usage("cv.models names no models"));
    }
    let plan = CvPlan::new(k, repeats, seed);
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let recipe = build_recipe(&mut cfg, name, &feature, &covariates, family, &grid)?;
        reports.push(cross_validate(recipe.as_ref(), &dataset, &plan)?);
    }
    timer.mark("compute");
    write_metric_reports(&out.join("cv_report.csv"), &reports)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}

/// One gaussian-outcome feature with a location effect; enough to smoke
/// an end-to-end pipeline without a scenario file.
fn default_scenario() -> ScenarioSpec {
    ScenarioSpec {
        n_subjects: 60,
        obs_range: (40, 80),
        features: vec![FeatureSpec {
            name: "speed".into(),
            domain: "pace".into(),
            family: SubjectFamily::Gaussian {
                mean: ParamLaw::Uniform { lo: -1.0, hi: 1.0 },
                sd: ParamLaw::Uniform { lo: 0.6, hi: 1.4 },
            },
        }],
        mechanism: Mechanism::ConstantCoefficient { intercept: 0.3, slope: 1.2 },
        outcome: OutcomeLaw::Gaussian { noise_sd: 0.4 },
        seed: 0,
    }
}

fn simulate_cmd(mut cfg: Resolved, mut timer: Timer) -> CliResult<()> {
    cfg.record_str("command", "simulate");
    let out = out_dir(&mut cfg)?;
    let mut spec = match cfg.opt_path("simulate.scenario")? {
        Some(path) => read_json::<ScenarioSpec>(&path)?,
        None => default_scenario(),
    };
    if let Some(n) = cfg.opt_usize("simulate.subjects")? {
        spec.n_subjects = n;
    }
    // An explicit seed overrides the scenario's; otherwise the scenario
    // wins and is pinned in the manifest.
    if let Some(seed) = cfg.opt_u64("seed")? {
        spec.seed = seed;
    }
    cfg.record_u64("seed", spec.seed);
    let seed = spec.seed;
    timer.mark("read");
    let (dataset, truth) = qdist::generate(&spec)?;
    timer.mark("compute");
    write_dataset(
        &dataset,
        &out.join("observations.csv"),
        &out.join("subjects.csv"),
        &out.join("domains.csv"),
    )?;
    write_json(&out.join("ground_truth.json"), &truth)?;
    timer.mark("write");
    write_manifest(&out, cfg, seed, timer)
}
