//! Joint and individual variation across feature domains: rank-based
//! normalization of per-domain L-moment blocks, the alternating SVD
//! decomposition into shared and domain-specific low-rank structure,
//! permutation-based rank selection, and score/correlation extraction.

use ndarray::Array2;
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::svd_trunc;
use crate::lmoments::lmoments_from_quantile;
use crate::quantiles::{QuantileGrid, RepeatedMeasuresDataset};
use crate::util::{derive_rng, std_normal_icdf};

const CONVERGENCE_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 500;

/// One domain's variables-by-subjects matrix with row labels.
#[derive(Debug, Clone)]
pub struct DomainBlock {
    pub domain: String,
    pub row_labels: Vec<String>,
    /// Shape (variables, subjects).
    pub data: Array2<f64>,
}

/// Build per-domain blocks of the first `order` L-moments for every
/// feature, using the dataset's feature → domain assignment. Rows are
/// labeled `feature:Lk`; columns follow subject order.
pub fn lmoment_blocks(
    dataset: &RepeatedMeasuresDataset,
    order: usize,
    grid: &QuantileGrid,
) -> Result<Vec<DomainBlock>> {
    if order == 0 {
        return Err(Error::InvalidArgument("L-moment order must be >= 1".into()));
    }
    let features = dataset.feature_ids();
    if features.is_empty() {
        return Err(Error::InvalidArgument("dataset has no features".into()));
    }
    let mut by_domain: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for f in &features {
        let domain = dataset
            .domains
            .get(f)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("feature `{f}` has no domain assignment"))
            })?
            .clone();
        by_domain.entry(domain).or_default().push(f.clone());
    }
    let n = dataset.n_subjects();
    let mut blocks = Vec::with_capacity(by_domain.len());
    for (domain, feats) in by_domain {
        let mut row_labels = Vec::with_capacity(feats.len() * order);
        let mut data = Array2::zeros((feats.len() * order, n));
        for (fi, feature) in feats.iter().enumerate() {
            let qfs = dataset.quantile_functions(feature, grid)?;
            for (i, qf) in qfs.iter().enumerate() {
                let lm = lmoments_from_quantile(qf, order)?;
                for k in 0..order {
                    data[[fi * order + k, i]] = lm.values()[k];
                }
            }
            for k in 0..order {
                row_labels.push(format!("{feature}:L{}", k + 1));
            }
        }
        blocks.push(DomainBlock { domain, row_labels, data });
    }
    Ok(blocks)
}

/// What `normalize_blocks` did: which rows were dropped as constant and
/// the Frobenius norm each block was divided by.
#[derive(Debug, Clone, Serialize)]
pub struct NormalizationRecord {
    pub dropped_rows: Vec<String>,
    pub block_scales: Vec<(String, f64)>,
}

// Midranks of a row: average of 1-based positions within tied runs.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end (1-based); midrank is their mean
        let mid = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mid;
        }
        start = end;
    }
    ranks
}

/// Rank-based normalization: per row z = Φ⁻¹((midrank − ½)/n), then
/// center each row, then scale each block to unit Frobenius norm.
/// Constant rows are dropped with a warning; n < 3 is an error.
pub fn normalize_blocks(
    blocks: &[DomainBlock],
) -> Result<(Vec<DomainBlock>, NormalizationRecord)> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("no blocks to normalize".into()));
    }
    let n = blocks[0].data.ncols();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "rank-based normalization needs at least 3 subjects, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(blocks.len());
    let mut dropped_rows = Vec::new();
    let mut block_scales = Vec::with_capacity(blocks.len());
    for block in blocks {
        if block.data.ncols() != n {
            return Err(Error::LengthMismatch { expected: n, found: block.data.ncols() });
        }
        let mut kept_labels = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, label) in block.row_labels.iter().enumerate() {
            let row: Vec<f64> = block.data.row(r).to_vec();
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                log::warn!("dropping constant row `{}:{}`", block.domain, label);
                dropped_rows.push(format!("{}:{}", block.domain, label));
                continue;
            }
            let ranks = midranks(&row);
            let mut z: Vec<f64> =
                ranks.iter().map(|rk| std_normal_icdf((rk - 0.5) / n as f64)).collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            for v in &mut z {
                *v -= mean;
            }
            rows.push(z);
            kept_labels.push(label.clone());
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "all rows of block `{}` are constant",
                block.domain
            )));
        }
        let norm: f64 = rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut data = Array2::zeros((rows.len(), n));
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                data[[r, c]] = v / norm;
            }
        }
        block_scales.push((block.domain.clone(), norm));
        out.push(DomainBlock { domain: block.domain.clone(), row_labels: kept_labels, data });
    }
    Ok((out, NormalizationRecord { dropped_rows, block_scales }))
}

/// Variance accounting for one block, in percent. The denominator is
/// ‖J‖²+‖A‖²+‖ε‖² so the three shares always total 100.
#[derive(Debug, Clone, Serialize)]
pub struct BlockVariance {
    pub domain: String,
    pub joint_pct: f64,
    pub individual_pct: f64,
    pub residual_pct: f64,
}

/// One extracted component set: scores are (rank, subjects) with rows
/// σ_r·v_r; loadings are (variables, rank).
#[derive(Debug, Clone)]
pub struct ComponentSet {
    pub scores: Array2<f64>,
    pub loadings: Array2<f64>,
    pub singular_values: Vec<f64>,
}

/// Result of the alternating decomposition into joint, individual, and
/// residual structure per block.
#[derive(Debug, Clone)]
pub struct JiveDecomposition {
    pub domains: Vec<String>,
    pub row_labels: Vec<Vec<String>>,
    pub joint: Vec<Array2<f64>>,
    pub individual: Vec<Array2<f64>>,
    pub residual: Vec<Array2<f64>>,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    pub joint_components: ComponentSet,
    pub individual_components: Vec<ComponentSet>,
    pub variance: Vec<BlockVariance>,
    pub converged: bool,
    pub iterations: usize,
}

impl JiveDecomposition {
    pub fn n_subjects(&self) -> usize {
        self.joint_components.scores.ncols()
    }

    /// All score vectors with names: joint_r first, then per-domain
    /// individual components in block order.
    pub fn score_vectors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for r in 0..self.joint_rank {
            out.push((format!("joint_{}", r + 1), self.joint_components.scores.row(r).to_vec()));
        }
        for (d, comp) in self.individual_components.iter().enumerate() {
            for r in 0..self.individual_ranks[d] {
                out.push((
                    format!("{}_individual_{}", self.domains[d], r + 1),
                    comp.scores.row(r).to_vec(),
                ));
            }
        }
        out
    }
}

fn frob2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn stack(blocks: &[Array2<f64>]) -> Array2<f64> {
    let n = blocks[0].ncols();
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Array2::zeros((total, n));
    let mut offset = 0;
    for b in blocks {
        for i in 0..b.nrows() {
            for j in 0..n {
                out[[offset + i, j]] = b[[i, j]];
            }
        }
        offset += b.nrows();
    }
    out
}

// Truncated SVD with a deterministic sign convention: each loading
// column's largest-magnitude entry is nonnegative.
fn components(a: &Array2<f64>, rank: usize) -> Result<ComponentSet> {
    let (mut u, sigma, mut v_t) = svd_trunc(a, rank)?;
    let r = sigma.len();
    for k in 0..r {
        let mut best = 0;
        for i in 0..u.nrows() {
            if u[[i, k]].abs() > u[[best, k]].abs() {
                best = i;
            }
        }
        if u[[best, k]] < 0.0 {
            for i in 0..u.nrows() {
                u[[i, k]] = -u[[i, k]];
            }
            for j in 0..v_t.ncols() {
                v_t[[k, j]] = -v_t[[k, j]];
            }
        }
    }
    let mut scores = Array2::zeros((r, a.ncols()));
    for k in 0..r {
        for j in 0..a.ncols() {
            scores[[k, j]] = sigma[k] * v_t[[k, j]];
        }
    }
    Ok(ComponentSet { scores, loadings: u, singular_values: sigma })
}

fn low_rank(set: &ComponentSet) -> Array2<f64> {
    // loadings · scores reassembles U Σ Vᵀ since scores already carry σ.
    let (rows, r) = set.loadings.dim();
    let n = set.scores.ncols();
    let mut out = Array2::zeros((rows, n));
    for i in 0..rows {
        for k in 0..r {
            let l = set.loadings[[i, k]];
            if l == 0.0 {
                continue;
            }
            for j in 0..n {
                out[[i, j]] += l * set.scores[[k, j]];
            }
        }
    }
    out
}

// a · (I − VᵀV) for v_t of shape (s, n): removes the joint row space.
fn project_out(a: &Array2<f64>, v_t: &Array2<f64>) -> Array2<f64> {
    if v_t.nrows() == 0 {
        return a.clone();
    }
    let av_t = a.dot(&v_t.t());
    a - &av_t.dot(v_t)
}

/// Alternating decomposition with fixed ranks. Non-convergence after 500
/// iterations returns the last iterate with `converged: false`.
pub fn jive_decompose(
    blocks: &[DomainBlock],
    joint_rank: usize,
    individual_ranks: &[usize],
) -> Result<JiveDecomposition> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("no blocks to decompose".into()));
    }
    if individual_ranks.len() != blocks.len() {
        return Err(Error::LengthMismatch {
            expected: blocks.len(),
            found: individual_ranks.len(),
        });
    }
    let n = blocks[0].data.ncols();
    let total_rows: usize = blocks.iter().map(|b| b.data.nrows()).sum();
    for b in blocks {
        if b.data.ncols() != n {
            return Err(Error::LengthMismatch { expected: n, found: b.data.ncols() });
        }
    }
    let max_individual = individual_ranks.iter().copied().max().unwrap_or(0);
    if joint_rank + max_individual > n {
        return Err(Error::InvalidArgument(format!(
            "joint rank {joint_rank} plus individual rank {max_individual} exceeds {n} subjects"
        )));
    }
    if joint_rank > total_rows.min(n) {
        return Err(Error::InvalidArgument(format!(
            "joint rank {joint_rank} exceeds the {total_rows}x{n} stacked block"
        )));
    }
    for (b, &s_d) in blocks.iter().zip(individual_ranks) {
        if s_d > b.data.nrows().min(n) {
            return Err(Error::InvalidArgument(format!(
                "individual rank {s_d} exceeds block `{}`",
                b.domain
            )));
        }
    }

    let originals: Vec<Array2<f64>> = blocks.iter().map(|b| b.data.clone()).collect();
    let row_offsets: Vec<usize> = {
        let mut offsets = vec![0];
        for b in blocks {
            offsets.push(offsets.last().unwrap() + b.data.nrows());
        }
        offsets
    };
    let mut individual: Vec<Array2<f64>> =
        blocks.iter().map(|b| Array2::zeros(b.data.dim())).collect();
    let mut joint_stacked: Array2<f64> = Array2::zeros((total_rows, n));
    let mut joint_components = ComponentSet {
        scores: Array2::zeros((0, n)),
        loadings: Array2::zeros((total_rows, 0)),
        singular_values: vec![],
    };
    let mut converged = joint_rank == 0;
    let mut iterations = 0;

    if joint_rank > 0 {
        let mut previous = joint_stacked.clone();
        loop {
            iterations += 1;
            let current = stack(&originals) - &stack(&individual);
            joint_components = components(&current, joint_rank)?;
            joint_stacked = low_rank(&joint_components);
            // Orthonormal right factor for the row-space projection.
            let mut vt_unit = joint_components.scores.clone();
            for k in 0..joint_rank {
                let s = joint_components.singular_values[k];
                if s > 0.0 {
                    for j in 0..n {
                        vt_unit[[k, j]] /= s;
                    }
                }
            }
            for (d, block) in originals.iter().enumerate() {
                let j_d = joint_block(&joint_stacked, &row_offsets, d);
                let detrended = block - &j_d;
                let projected = project_out(&detrended, &vt_unit);
                let comp = components(&projected, individual_ranks[d])?;
                individual[d] = low_rank(&comp);
            }
            let delta = frob2(&(&joint_stacked - &previous)).sqrt();
            if delta < CONVERGENCE_TOLERANCE {
                converged = true;
                break;
            }
            if iterations >= MAX_ITERATIONS {
                break;
            }
            previous = joint_stacked.clone();
        }
    }

    // Final per-block components, consistent with the converged joint.
    let vt_unit = {
        let mut vt = joint_components.scores.clone();
        for k in 0..joint_rank {
            let s = joint_components.singular_values[k];
            if s > 0.0 {
                for j in 0..n {
                    vt[[k, j]] /= s;
                }
            }
        }
        vt
    };
    let mut individual_components = Vec::with_capacity(blocks.len());
    let mut joint_blocks = Vec::with_capacity(blocks.len());
    let mut residual = Vec::with_capacity(blocks.len());
    let mut variance = Vec::with_capacity(blocks.len());
    for (d, block) in originals.iter().enumerate() {
        let j_d = joint_block(&joint_stacked, &row_offsets, d);
        let detrended = block - &j_d;
        let projected = project_out(&detrended, &vt_unit);
        let comp = components(&projected, individual_ranks[d])?;
        individual[d] = low_rank(&comp);
        let eps = block - &j_d - &individual[d];
        let (vj, va, ve) = (frob2(&j_d), frob2(&individual[d]), frob2(&eps));
        let denom = vj + va + ve;
        // A zero block carries no variance to attribute; call it residual.
        let (jp, ap, rp) = if denom > 0.0 {
            (100.0 * vj / denom, 100.0 * va / denom, 100.0 * ve / denom)
        } else {
            (0.0, 0.0, 100.0)
        };
        variance.push(BlockVariance {
            domain: blocks[d].domain.clone(),
            joint_pct: jp,
            individual_pct: ap,
            residual_pct: rp,
        });
        joint_blocks.push(j_d);
        residual.push(eps);
        individual_components.push(comp);
    }

    Ok(JiveDecomposition {
        domains: blocks.iter().map(|b| b.domain.clone()).collect(),
        row_labels: blocks.iter().map(|b| b.row_labels.clone()).collect(),
        joint: joint_blocks,
        individual,
        residual,
        joint_rank,
        individual_ranks: individual_ranks.to_vec(),
        joint_components,
        individual_components,
        variance,
        converged,
        iterations,
    })
}

fn joint_block(stacked: &Array2<f64>, offsets: &[usize], d: usize) -> Array2<f64> {
    let rows = offsets[d + 1] - offsets[d];
    let n = stacked.ncols();
    let mut out = Array2::zeros((rows, n));
    for i in 0..rows {
        for j in 0..n {
            out[[i, j]] = stacked[[offsets[d] + i, j]];
        }
    }
    out
}

/// Ranks chosen by the permutation procedure.
#[derive(Debug, Clone, Serialize)]
pub struct RankSelection {
    pub joint: usize,
    pub individual: Vec<usize>,
}

fn fisher_yates(rng: &mut impl RngCore, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

fn singular_values(a: &Array2<f64>) -> Result<Vec<f64>> {
    let rank = a.nrows().min(a.ncols());
    let (_, sigma, _) = svd_trunc(a, rank)?;
    Ok(sigma)
}

// (1−α) empirical quantile, type-1: the ceil((1−α)·B)-th smallest.
fn upper_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let b = sorted.len();
    let idx = ((1.0 - alpha) * b as f64).ceil() as usize;
    sorted[idx.clamp(1, b) - 1]
}

fn forward_select(observed: &[f64], null_reps: &[Vec<f64>], alpha: f64, cap: usize) -> usize {
    let mut rank = 0;
    for r in 0..cap.min(observed.len()) {
        let mut null_r: Vec<f64> =
            null_reps.iter().map(|reps| reps.get(r).copied().unwrap_or(0.0)).collect();
        null_r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if observed[r] > upper_quantile(&null_r, alpha) {
            rank = r + 1;
        } else {
            break;
        }
    }
    rank
}

/// Choose the joint rank, then per-block individual ranks, by comparing
/// singular values against permutation nulls: whole-column permutations
/// per block break cross-block alignment (joint null); within-row
/// permutations break within-block structure (individual null).
/// Deterministic given the seed; replicates run in parallel.
pub fn select_ranks_permutation(
    blocks: &[DomainBlock],
    alpha: f64,
    n_perm: usize,
    seed: u64,
) -> Result<RankSelection> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("no blocks given".into()));
    }
    if n_perm < 20 {
        return Err(Error::InvalidArgument(format!(
            "need at least 20 permutations, got {n_perm}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n = blocks[0].data.ncols();
    for b in blocks {
        if b.data.ncols() != n {
            return Err(Error::LengthMismatch { expected: n, found: b.data.ncols() });
        }
    }
    let data: Vec<Array2<f64>> = blocks.iter().map(|b| b.data.clone()).collect();
    let stacked = stack(&data);
    let observed_joint = singular_values(&stacked)?;
    let joint_nulls: Vec<Vec<f64>> = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut rng = derive_rng(seed, &[1, b as u64]);
            let permuted: Vec<Array2<f64>> = data
                .iter()
                .map(|block| {
                    let perm = fisher_yates(&mut rng, n);
                    let mut out = Array2::zeros(block.dim());
                    for (j_new, &j_old) in perm.iter().enumerate() {
                        for i in 0..block.nrows() {
                            out[[i, j_new]] = block[[i, j_old]];
                        }
                    }
                    out
                })
                .collect();
            singular_values(&stack(&permuted))
        })
        .collect::<Result<_>>()?;
    let cap_joint = stacked.nrows().min(n.saturating_sub(1));
    let joint = forward_select(&observed_joint, &joint_nulls, alpha, cap_joint);

    // Joint row space at the selected rank, for projecting each block.
    let v_t = if joint > 0 {
        let (_, _, vt) = svd_trunc(&stacked, joint)?;
        vt
    } else {
        Array2::zeros((0, n))
    };
    let mut individual = Vec::with_capacity(blocks.len());
    for (d, block) in data.iter().enumerate() {
        let projected = project_out(block, &v_t);
        let observed = singular_values(&projected)?;
        let nulls: Vec<Vec<f64>> = (0..n_perm)
            .into_par_iter()
            .map(|b| {
                let mut rng = derive_rng(seed, &[2, d as u64, b as u64]);
                let mut permuted = Array2::zeros(projected.dim());
                for i in 0..projected.nrows() {
                    let perm = fisher_yates(&mut rng, n);
                    for (j_new, &j_old) in perm.iter().enumerate() {
                        permuted[[i, j_new]] = projected[[i, j_old]];
                    }
                }
                singular_values(&permuted)
            })
            .collect::<Result<_>>()?;
        let cap = block.nrows().min(n - joint);
        individual.push(forward_select(&observed, &nulls, alpha, cap));
    }
    Ok(RankSelection { joint, individual })
}

/// Pearson correlation of one score vector with one block row.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreCorrelation {
    pub score_name: String,
    pub domain: String,
    pub row_label: String,
    pub correlation: f64,
    /// Set when the score had zero variance and the correlation was
    /// reported as 0 by convention.
    pub degenerate_score: bool,
}

/// Correlate every joint and individual score with every row of the
/// given (normalized) blocks. Results are sorted by descending absolute
/// correlation.
pub fn score_cross_correlation(
    decomp: &JiveDecomposition,
    blocks: &[DomainBlock],
) -> Result<Vec<ScoreCorrelation>> {
    let n = decomp.n_subjects();
    for b in blocks {
        if b.data.ncols() != n {
            return Err(Error::LengthMismatch { expected: n, found: b.data.ncols() });
        }
    }
    // A component fitted to numerical noise has a score vector at machine
    // scale relative to the data; its correlations are meaningless.
    let scale: f64 = blocks.iter().map(|b| frob2(&b.data)).sum();
    let variance_floor = 1e-24 * scale;
    let mut out = Vec::new();
    for (score_name, score) in decomp.score_vectors() {
        let ms = score.iter().sum::<f64>() / n as f64;
        let vs: f64 = score.iter().map(|v| (v - ms).powi(2)).sum();
        let degenerate = vs <= variance_floor;
        for block in blocks {
            for (r, label) in block.row_labels.iter().enumerate() {
                let row = block.data.row(r);
                let mr = row.sum() / n as f64;
                let vr: f64 = row.iter().map(|v| (v - mr).powi(2)).sum();
                let correlation = if degenerate || vr <= 0.0 {
                    0.0
                } else {
                    let cov: f64 =
                        score.iter().zip(row.iter()).map(|(s, x)| (s - ms) * (x - mr)).sum();
                    cov / (vs * vr).sqrt()
                };
                out.push(ScoreCorrelation {
                    score_name: score_name.clone(),
                    domain: block.domain.clone(),
                    row_label: label.clone(),
                    correlation,
                    degenerate_score: degenerate,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.correlation
            .abs()
            .partial_cmp(&a.correlation.abs())
            .unwrap()
            .then_with(|| a.score_name.cmp(&b.score_name))
            .then_with(|| a.row_label.cmp(&b.row_label))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantiles::SubjectRecord;
    use crate::util::{derive_rng, open_unit};
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn normalize_vec(v: &mut [f64]) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v {
            *x /= norm;
        }
    }

    fn center_vec(v: &mut [f64]) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        for x in v {
            *x -= mean;
        }
    }

    fn orthogonalize(v: &mut [f64], against: &[f64]) {
        let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
        for (x, b) in v.iter_mut().zip(against) {
            *x -= dot * b;
        }
    }

    fn outer(a: &[f64], b: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((a.len(), b.len()));
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m[[i, j]] = ai * bj;
            }
        }
        m
    }

    // Planted structure: shared subject pattern u across two domains,
    // per-domain individual patterns t_d orthogonal to u, and loadings
    // w_d orthogonal to v_d so the top singular triplet is exactly joint.
    fn planted_blocks() -> (Vec<DomainBlock>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let n = 12;
        let mut u: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        center_vec(&mut u);
        normalize_vec(&mut u);
        let mut t1: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
        center_vec(&mut t1);
        orthogonalize(&mut t1, &u);
        normalize_vec(&mut t1);
        let mut t2: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -0.7 }).collect();
        center_vec(&mut t2);
        orthogonalize(&mut t2, &u);
        orthogonalize(&mut t2, &t1);
        normalize_vec(&mut t2);

        let mut v1 = vec![1.0, 1.0, 2.0, 0.5, 1.5];
        normalize_vec(&mut v1);
        // Orthogonal to v1 by construction, with an exact zero at index 2
        // so the row "p2" stays a pure multiple of the joint pattern.
        let mut w1 = vec![1.0, -1.0, 0.0, 1.0, -1.0 / 3.0];
        normalize_vec(&mut w1);
        let v1: Vec<f64> = v1.iter().map(|x| 3.0 * x).collect();

        let mut v2 = vec![0.5, 1.0, -0.5, 1.2];
        normalize_vec(&mut v2);
        let mut w2 = vec![1.0, 0.2, 1.0, -0.4];
        orthogonalize(&mut w2, &v2);
        normalize_vec(&mut w2);
        let v2: Vec<f64> = v2.iter().map(|x| 2.5 * x).collect();
        let w2: Vec<f64> = w2.iter().map(|x| 0.8 * x).collect();

        let joint1 = outer(&v1, &u);
        let joint2 = outer(&v2, &u);
        let indiv1 = outer(&w1, &t1);
        let indiv2 = outer(&w2, &t2);
        let blocks = vec![
            DomainBlock {
                domain: "pace".into(),
                row_labels: (0..5).map(|r| format!("p{r}")).collect(),
                data: &joint1 + &indiv1,
            },
            DomainBlock {
                domain: "rhythm".into(),
                row_labels: (0..4).map(|r| format!("r{r}")).collect(),
                data: &joint2 + &indiv2,
            },
        ];
        (blocks, vec![joint1, joint2], vec![indiv1, indiv2])
    }

    fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (frob2(&(a - b)) / frob2(b)).sqrt()
    }

    #[test]
    fn increasing_row_maps_to_fixed_z_vector() {
        let n = 5;
        let block = DomainBlock {
            domain: "d".into(),
            row_labels: vec!["a".into()],
            data: Array2::from_shape_vec((1, n), vec![3.0, 8.0, 21.0, 100.0, 4000.0]).unwrap(),
        };
        let (normed, _) = normalize_blocks(&[block]).unwrap();
        // Expected: z_j = icdf((j+0.5)/5), centered, then unit Frobenius.
        let mut expected: Vec<f64> =
            (0..n).map(|j| std_normal_icdf((j as f64 + 0.5) / n as f64)).collect();
        let mean = expected.iter().sum::<f64>() / n as f64;
        for v in &mut expected {
            *v -= mean;
        }
        let norm = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(normed[0].data[[0, j]], e / norm, epsilon = 1e-12);
        }
        // Any other strictly increasing row gives the identical vector.
        let other = DomainBlock {
            domain: "d".into(),
            row_labels: vec!["a".into()],
            data: Array2::from_shape_vec((1, n), vec![-9.0, -2.0, 0.1, 0.2, 0.3]).unwrap(),
        };
        let (normed_other, _) = normalize_blocks(&[other]).unwrap();
        assert_eq!(normed[0].data, normed_other[0].data);
    }

    #[test]
    fn ties_use_midranks() {
        let block = DomainBlock {
            domain: "d".into(),
            row_labels: vec!["a".into()],
            data: Array2::from_shape_vec((1, 4), vec![5.0, 5.0, 7.0, 9.0]).unwrap(),
        };
        let (normed, _) = normalize_blocks(&[block]).unwrap();
        // Midrank of the tied pair is 1.5 → (1.5 − 0.5)/4 = 0.25.
        let mut expected = vec![
            std_normal_icdf(0.25),
            std_normal_icdf(0.25),
            std_normal_icdf((3.0 - 0.5) / 4.0),
            std_normal_icdf((4.0 - 0.5) / 4.0),
        ];
        let mean = expected.iter().sum::<f64>() / 4.0;
        for v in &mut expected {
            *v -= mean;
        }
        let norm = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(normed[0].data[[0, j]], e / norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalized_blocks_have_unit_frobenius_norm_and_centered_rows() {
        let mut rng = derive_rng(5, &[0]);
        let data = Array2::from_shape_fn((6, 9), |_| open_unit(&mut rng) * 10.0);
        let block = DomainBlock {
            domain: "d".into(),
            row_labels: (0..6).map(|r| format!("x{r}")).collect(),
            data,
        };
        let (normed, record) = normalize_blocks(&[block]).unwrap();
        assert_abs_diff_eq!(frob2(&normed[0].data).sqrt(), 1.0, epsilon = 1e-12);
        for r in 0..6 {
            let mean = normed[0].data.row(r).sum() / 9.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        }
        assert!(record.dropped_rows.is_empty());
        assert_eq!(record.block_scales.len(), 1);
        assert!(record.block_scales[0].1 > 0.0);
    }

    #[test]
    fn constant_rows_are_dropped() {
        let data = Array2::from_shape_vec(
            (2, 4),
            vec![2.5, 2.5, 2.5, 2.5, 1.0, 3.0, 2.0, 4.0],
        )
        .unwrap();
        let block = DomainBlock {
            domain: "d".into(),
            row_labels: vec!["flat".into(), "varies".into()],
            data,
        };
        let (normed, record) = normalize_blocks(&[block]).unwrap();
        assert_eq!(normed[0].row_labels, vec!["varies".to_string()]);
        assert_eq!(normed[0].data.nrows(), 1);
        assert_eq!(record.dropped_rows, vec!["d:flat".to_string()]);
    }

    #[test]
    fn too_few_subjects_rejected() {
        let block = DomainBlock {
            domain: "d".into(),
            row_labels: vec!["a".into()],
            data: Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap(),
        };
        assert!(normalize_blocks(&[block]).is_err());
    }

    #[test]
    fn zero_blocks_decompose_to_zero() {
        let blocks = vec![DomainBlock {
            domain: "d".into(),
            row_labels: (0..3).map(|r| format!("x{r}")).collect(),
            data: Array2::zeros((3, 8)),
        }];
        let decomp = jive_decompose(&blocks, 1, &[1]).unwrap();
        assert!(decomp.joint[0].iter().all(|v| *v == 0.0));
        assert!(decomp.individual[0].iter().all(|v| *v == 0.0));
        assert!(decomp.residual[0].iter().all(|v| *v == 0.0));
        assert_abs_diff_eq!(decomp.variance[0].residual_pct, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn planted_rank_one_structures_recovered() {
        let (blocks, joints, indivs) = planted_blocks();
        let decomp = jive_decompose(&blocks, 1, &[1, 1]).unwrap();
        assert!(decomp.converged);
        for d in 0..2 {
            assert!(
                rel_error(&decomp.joint[d], &joints[d]) < 1e-6,
                "joint block {d} error {}",
                rel_error(&decomp.joint[d], &joints[d])
            );
            assert!(
                rel_error(&decomp.individual[d], &indivs[d]) < 1e-6,
                "individual block {d} error {}",
                rel_error(&decomp.individual[d], &indivs[d])
            );
        }
        // Row-space orthogonality: A^d V ≈ 0 for V from the joint SVD.
        for d in 0..2 {
            for r in 0..decomp.joint_rank {
                let sigma = decomp.joint_components.singular_values[r];
                let v: Array1<f64> = decomp.joint_components.scores.row(r).map(|x| x / sigma);
                let av = decomp.individual[d].dot(&v);
                let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm < 1e-8, "block {d} component {r}: |A v| = {norm:.3e}");
            }
        }
        // Exact additive reconstruction and variance accounting.
        for d in 0..2 {
            let remainder =
                &(&(&blocks[d].data - &decomp.joint[d]) - &decomp.individual[d])
                    - &decomp.residual[d];
            let max_err = remainder.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert_eq!(max_err, 0.0);
            let v = &decomp.variance[d];
            assert_abs_diff_eq!(
                v.joint_pct + v.individual_pct + v.residual_pct,
                100.0,
                epsilon = 1e-9
            );
            assert!(v.joint_pct > v.individual_pct);
            assert!(v.residual_pct < 1e-6);
        }
    }

    #[test]
    fn joint_rank_zero_is_per_block_truncated_svd() {
        let mut rng = derive_rng(7, &[0]);
        let data = Array2::from_shape_fn((5, 10), |_| open_unit(&mut rng) - 0.5);
        let blocks = vec![DomainBlock {
            domain: "d".into(),
            row_labels: (0..5).map(|r| format!("x{r}")).collect(),
            data: data.clone(),
        }];
        let decomp = jive_decompose(&blocks, 0, &[2]).unwrap();
        let comp = components(&data, 2).unwrap();
        let direct = low_rank(&comp);
        for (a, b) in decomp.individual[0].iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert!(decomp.joint[0].iter().all(|v| *v == 0.0));
        assert!(decomp.converged);
    }

    #[test]
    fn infeasible_ranks_rejected() {
        let (blocks, _, _) = planted_blocks();
        // 12 subjects: joint 8 + individual 5 > 12.
        assert!(jive_decompose(&blocks, 8, &[5, 5]).is_err());
        assert!(jive_decompose(&blocks, 1, &[1]).is_err());
        assert!(jive_decompose(&blocks, 1, &[6, 1]).is_err());
    }

    #[test]
    fn rank_selection_recovers_planted_ranks() {
        let (blocks, _, _) = planted_blocks();
        let sel = select_ranks_permutation(&blocks, 0.05, 40, 97).unwrap();
        assert_eq!(sel.joint, 1);
        assert_eq!(sel.individual, vec![1, 1]);
    }

    #[test]
    fn rank_selection_on_noise_finds_nothing() {
        let mut rng = derive_rng(131, &[0]);
        let blocks = vec![
            DomainBlock {
                domain: "a".into(),
                row_labels: (0..6).map(|r| format!("a{r}")).collect(),
                data: Array2::from_shape_fn((6, 20), |_| open_unit(&mut rng) - 0.5),
            },
            DomainBlock {
                domain: "b".into(),
                row_labels: (0..5).map(|r| format!("b{r}")).collect(),
                data: Array2::from_shape_fn((5, 20), |_| open_unit(&mut rng) - 0.5),
            },
        ];
        let sel = select_ranks_permutation(&blocks, 0.05, 40, 13).unwrap();
        assert_eq!(sel.joint, 0);
        assert_eq!(sel.individual, vec![0, 0]);
    }

    #[test]
    fn rank_selection_enforces_minimum_permutations() {
        let (blocks, _, _) = planted_blocks();
        assert!(select_ranks_permutation(&blocks, 0.05, 19, 1).is_err());
        assert!(select_ranks_permutation(&blocks, 0.05, 20, 1).is_ok());
    }

    #[test]
    fn cross_correlation_ranks_planted_rows_first() {
        let (blocks, _, _) = planted_blocks();
        let decomp = jive_decompose(&blocks, 1, &[1, 1]).unwrap();
        let table = score_cross_correlation(&decomp, &blocks).unwrap();
        // The joint score is proportional to u; rows with zero individual
        // loading (w_d entry 0) are exactly multiples of u.
        let joint_rows: Vec<&ScoreCorrelation> =
            table.iter().filter(|c| c.score_name == "joint_1").collect();
        // w1 is zero at index 2, so row "p2" is a pure multiple of the
        // joint pattern and must top the ranking at correlation ±1.
        let top = &joint_rows[0];
        assert_eq!(top.row_label, "p2");
        assert_abs_diff_eq!(top.correlation.abs(), 1.0, epsilon = 1e-10);
        assert!(!top.degenerate_score);
    }

    #[test]
    fn degenerate_score_is_flagged_as_zero() {
        // Purely joint data: the individual component is null, its score
        // vector vanishes, and correlations come back flagged zeros.
        let (_, joints, _) = planted_blocks();
        let blocks = vec![
            DomainBlock {
                domain: "pace".into(),
                row_labels: (0..5).map(|r| format!("p{r}")).collect(),
                data: joints[0].clone(),
            },
            DomainBlock {
                domain: "rhythm".into(),
                row_labels: (0..4).map(|r| format!("r{r}")).collect(),
                data: joints[1].clone(),
            },
        ];
        let decomp = jive_decompose(&blocks, 1, &[1, 1]).unwrap();
        let table = score_cross_correlation(&decomp, &blocks).unwrap();
        let flagged: Vec<&ScoreCorrelation> =
            table.iter().filter(|c| c.degenerate_score).collect();
        assert!(!flagged.is_empty());
        for c in flagged {
            assert_eq!(c.correlation, 0.0);
        }
    }

    fn two_feature_dataset(scale_f1: f64) -> RepeatedMeasuresDataset {
        let n = 10;
        let m = 30;
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = derive_rng(41, &[i as u64]);
            let f1: Vec<f64> =
                (0..m).map(|_| scale_f1 * (open_unit(&mut rng) + i as f64 * 0.1)).collect();
            let f2: Vec<f64> = (0..m).map(|_| open_unit(&mut rng) * (1.0 + i as f64 * 0.05)).collect();
            subjects.push(SubjectRecord {
                subject_id: format!("s{i}"),
                outcome: i as f64,
                covariates: vec![],
                observations: BTreeMap::from([
                    ("f1".to_string(), f1),
                    ("f2".to_string(), f2),
                ]),
            });
        }
        RepeatedMeasuresDataset {
            subjects,
            covariate_names: vec![],
            domains: BTreeMap::from([
                ("f1".to_string(), "gait".to_string()),
                ("f2".to_string(), "balance".to_string()),
            ]),
        }
    }

    #[test]
    fn pipeline_is_invariant_to_positive_feature_scaling() {
        let grid = QuantileGrid::default();
        let base = two_feature_dataset(1.0);
        let scaled = two_feature_dataset(3.7);
        let blocks_a = lmoment_blocks(&base, 4, &grid).unwrap();
        let blocks_b = lmoment_blocks(&scaled, 4, &grid).unwrap();
        let (norm_a, _) = normalize_blocks(&blocks_a).unwrap();
        let (norm_b, _) = normalize_blocks(&blocks_b).unwrap();
        for (a, b) in norm_a.iter().zip(&norm_b) {
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn lmoment_blocks_group_features_by_domain() {
        let grid = QuantileGrid::default();
        let data = two_feature_dataset(1.0);
        let blocks = lmoment_blocks(&data, 2, &grid).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].domain, "balance");
        assert_eq!(blocks[0].row_labels, vec!["f2:L1".to_string(), "f2:L2".to_string()]);
        assert_eq!(blocks[1].domain, "gait");
        assert_eq!(blocks[1].row_labels, vec!["f1:L1".to_string(), "f1:L2".to_string()]);
        assert_eq!(blocks[0].data.ncols(), 10);

        let mut missing = data.clone();
        missing.domains.remove("f1");
        assert!(lmoment_blocks(&missing, 2, &grid).is_err());
    }
}
