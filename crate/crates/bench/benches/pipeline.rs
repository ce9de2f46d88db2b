//! Wall-clock benchmarks for the pipeline stages that dominate real runs:
//! quantile estimation, sample L-moments, a penalized functional fit, and
//! the multi-block decomposition.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qdist::lmoments::lmoments_sample;
use qdist::quantiles::estimate_quantile_function;
use qdist::{
    fit_soqfr, generate, jive_decompose, lmoment_blocks, normalize_blocks, Family, FeatureSpec,
    LambdaChoice, Mechanism, OutcomeLaw, ParamLaw, QuantileGrid, ScenarioSpec, SoqfrBasis,
    SoqfrOptions, SubjectFamily,
};

fn gaussian_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Box-Muller pairs; the exact law does not matter for timing.
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u.ln()).sqrt() * v.cos()
        })
        .collect()
}

fn scenario(n_subjects: usize, two_domains: bool) -> ScenarioSpec {
    let gaussian = |seed_shift: f64| SubjectFamily::Gaussian {
        mean: ParamLaw::Uniform { lo: -1.0 + seed_shift, hi: 1.0 + seed_shift },
        sd: ParamLaw::Uniform { lo: 0.6, hi: 1.4 },
    };
    let mut features = vec![FeatureSpec {
        name: "speed".into(),
        domain: "pace".into(),
        family: gaussian(0.0),
    }];
    if two_domains {
        features.push(FeatureSpec {
            name: "cadence".into(),
            domain: "rhythm".into(),
            family: gaussian(0.5),
        });
    }
    ScenarioSpec {
        n_subjects,
        obs_range: (60, 100),
        features,
        mechanism: Mechanism::ConstantCoefficient { intercept: 0.2, slope: 1.0 },
        outcome: OutcomeLaw::Gaussian { noise_sd: 0.4 },
        seed: 17,
    }
}

fn bench_quantile_estimation(c: &mut Criterion) {
    let grid = QuantileGrid::midpoint(100).unwrap();
    let mut group = c.benchmark_group("estimate_quantile_function");
    for &n in &[100usize, 1_000, 10_000] {
        let sample = gaussian_sample(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| estimate_quantile_function(s, &grid).unwrap());
        });
    }
    group.finish();
}

fn bench_sample_lmoments(c: &mut Criterion) {
    let mut group = c.benchmark_group("lmoments_sample");
    for &n in &[100usize, 1_000, 10_000] {
        let sample = gaussian_sample(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| lmoments_sample(s, 4).unwrap());
        });
    }
    group.finish();
}

fn bench_soqfr_fit(c: &mut Criterion) {
    let (dataset, _) = generate(&scenario(100, false)).unwrap();
    let options = SoqfrOptions {
        grid: QuantileGrid::midpoint(100).unwrap(),
        basis: SoqfrBasis::Spline { size: 10 },
        lambda: LambdaChoice::Grid(qdist::pglm::log_lambda_grid(1e-4, 1e4, 11)),
    };
    c.bench_function("fit_soqfr_100_subjects", |b| {
        b.iter(|| fit_soqfr(&dataset, "speed", &[], Family::Gaussian, &options).unwrap());
    });
}

fn bench_jive(c: &mut Criterion) {
    let (dataset, _) = generate(&scenario(80, true)).unwrap();
    let grid = QuantileGrid::midpoint(100).unwrap();
    let blocks = lmoment_blocks(&dataset, 4, &grid).unwrap();
    let (normalized, _) = normalize_blocks(&blocks).unwrap();
    c.bench_function("jive_decompose_two_domains", |b| {
        b.iter(|| jive_decompose(&normalized, 1, &[1, 1]).unwrap());
    });
}

criterion_group!(
    benches,
    bench_quantile_estimation,
    bench_sample_lmoments,
    bench_soqfr_fit,
    bench_jive
);
criterion_main!(benches);
