//! L-moments: projections of quantile functions onto shifted Legendre
//! polynomials, the unbiased sample estimator via probability-weighted
//! moments, truncated reconstructions, and variance-explained profiles.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::quantiles::{QuantileFunction, QuantileGrid};

/// Largest polynomial degree whose coefficients stay exact in i64.
pub const MAX_LEGENDRE_DEGREE: usize = 12;

/// Shifted Legendre polynomials on [0,1]: P_r(p) = Σ_k s_{r,k} p^k with
/// s_{r,k} = (−1)^{r−k}·C(r,k)·C(r+k,k). The coefficients are exact
/// integers; P_r(1) = 1 and ∫P_r P_s dp = δ_{rs}/(2r+1).
#[derive(Debug, Clone)]
pub struct LegendreBasis {
    max_degree: usize,
}

fn binomial_table(n: usize) -> Vec<Vec<i64>> {
    let mut c = vec![vec![0i64; n + 1]; n + 1];
    for i in 0..=n {
        c[i][0] = 1;
        for j in 1..=i {
            c[i][j] = c[i - 1][j - 1] + if j <= i - 1 { c[i - 1][j] } else { 0 };
        }
    }
    c
}

fn coefficient_rows() -> &'static Vec<Vec<i64>> {
    static ROWS: OnceLock<Vec<Vec<i64>>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let c = binomial_table(2 * MAX_LEGENDRE_DEGREE);
        (0..=MAX_LEGENDRE_DEGREE)
            .map(|r| {
                (0..=r)
                    .map(|k| {
                        let sign = if (r - k) % 2 == 0 { 1 } else { -1 };
                        sign * c[r][k] * c[r + k][k]
                    })
                    .collect()
            })
            .collect()
    })
}

impl LegendreBasis {
    /// Basis carrying degrees 0..=max_degree; degrees beyond 12 would need
    /// coefficients outside the exact integer table and are rejected.
    pub fn new(max_degree: usize) -> Result<Self> {
        if max_degree > MAX_LEGENDRE_DEGREE {
            return Err(Error::DegreeTooLarge(max_degree));
        }
        Ok(LegendreBasis { max_degree })
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Exact coefficient s_{r,k} of p^k in P_r.
    pub fn coefficient(&self, r: usize, k: usize) -> i64 {
        assert!(r <= self.max_degree && k <= r, "coefficient index out of range");
        coefficient_rows()[r][k]
    }

    /// Horner evaluation of P_r(p).
    pub fn eval(&self, r: usize, p: f64) -> f64 {
        assert!(r <= self.max_degree, "degree out of range");
        let row = &coefficient_rows()[r];
        let mut acc = 0.0;
        for &s in row.iter().rev() {
            acc = acc * p + s as f64;
        }
        acc
    }

    /// Values of P_0..P_max_degree at p.
    pub fn eval_all(&self, p: f64) -> Vec<f64> {
        (0..=self.max_degree).map(|r| self.eval(r, p)).collect()
    }

    /// Rows P_r(p_j) for r = 0..=max_degree over a grid (one row per degree).
    pub fn eval_on_grid(&self, grid: &QuantileGrid) -> Vec<Vec<f64>> {
        (0..=self.max_degree)
            .map(|r| grid.levels().iter().map(|&p| self.eval(r, p)).collect())
            .collect()
    }
}

/// Value of the shifted Legendre polynomial of the given degree at p.
pub fn legendre_shifted(degree: usize, p: f64) -> Result<f64> {
    let basis = LegendreBasis::new(degree)?;
    Ok(basis.eval(degree, p))
}

/// First `order` L-moments of a distribution, tagged like a quantile
/// function with its subject and feature of origin.
#[derive(Debug, Clone)]
pub struct LMomentVector {
    pub subject_id: String,
    pub feature_id: String,
    values: Vec<f64>,
}

impl LMomentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("L-moment vector must have order >= 1".into()));
        }
        let bad: Vec<usize> =
            values.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { context: "L-moments".into(), indices: bad });
        }
        Ok(LMomentVector { subject_id: String::new(), feature_id: String::new(), values })
    }

    pub fn with_ids(mut self, subject_id: &str, feature_id: &str) -> Self {
        self.subject_id = subject_id.to_string();
        self.feature_id = feature_id.to_string();
        self
    }

    pub fn order(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// L_r, 1-based.
    pub fn get(&self, r: usize) -> f64 {
        self.values[r - 1]
    }
}

/// Projection route: L_r = ∫ Q(p) P_{r−1}(p) dp on the quantile grid.
pub fn lmoments_from_quantile(qf: &QuantileFunction, order: usize) -> Result<LMomentVector> {
    if order == 0 {
        return Err(Error::InvalidArgument("L-moment order must be >= 1".into()));
    }
    let basis = LegendreBasis::new(order - 1)?;
    let rows = basis.eval_on_grid(qf.grid());
    let values = rows
        .iter()
        .map(|row| {
            let prod: Vec<f64> = qf.values().iter().zip(row).map(|(q, p)| q * p).collect();
            qf.grid().integrate(&prod)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LMomentVector::new(values)?.with_ids(&qf.subject_id, &qf.feature_id))
}

/// Sample route: the unbiased estimator built from probability-weighted
/// moments of the order statistics, b_k = (1/n) Σ_i [C(i−1,k)/C(n−1,k)]·x_(i),
/// combined with the Legendre coefficients: l_{r+1} = Σ_k s_{r,k} b_k.
pub fn lmoments_sample(sample: &[f64], order: usize) -> Result<LMomentVector> {
    if order == 0 {
        return Err(Error::InvalidArgument("L-moment order must be >= 1".into()));
    }
    let n = sample.len();
    if n < order {
        return Err(Error::InsufficientSample { order, n });
    }
    let bad: Vec<usize> =
        sample.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite { context: "sample".into(), indices: bad });
    }
    let basis = LegendreBasis::new(order - 1)?;
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));

    // b[k] = (1/n) Σ_{i=k+1..n} x_(i) Π_{t=0..k−1} (i−1−t)/(n−1−t)
    let mut pwm = vec![0.0; order];
    for (k, b) in pwm.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &x) in sorted.iter().enumerate().skip(k) {
            // i is 0-based, so the 1-based index is i+1 and C(i,k)/C(n-1,k)
            // is the product of (i−t)/(n−1−t) over t < k.
            let mut w = 1.0;
            for t in 0..k {
                w *= (i - t) as f64 / (n - 1 - t) as f64;
            }
            acc += w * x;
        }
        *b = acc / n as f64;
    }

    let values: Vec<f64> = (0..order)
        .map(|r| (0..=r).map(|k| basis.coefficient(r, k) as f64 * pwm[k]).sum())
        .collect();
    LMomentVector::new(values)
}

/// Truncated reconstruction Q^K(p_j) = Σ_{r=1..K} (2r−1)·L_r·P_{r−1}(p_j).
/// Returned as bare grid values: truncation can break monotonicity, so the
/// result is quantile-function-shaped but not certified as one.
pub fn reconstruct_quantile(lm: &LMomentVector, grid: &QuantileGrid) -> Result<Vec<f64>> {
    let order = lm.order();
    let basis = LegendreBasis::new(order - 1)?;
    let rows = basis.eval_on_grid(grid);
    let mut values = vec![0.0; grid.resolution()];
    for r in 1..=order {
        let scale = (2 * r - 1) as f64 * lm.get(r);
        for (v, p) in values.iter_mut().zip(&rows[r - 1]) {
            *v += scale * p;
        }
    }
    Ok(values)
}

/// Proportion of distributional variance explained by truncation order k,
/// for k = 1..=k_max: τ²_k = 1 − ∫(Q − Q^k)² dp / ∫(Q − μ)² dp with μ the
/// distribution mean. τ²_1 is 0 by definition (Q^1 is the mean), and a
/// degenerate (constant) quantile function yields τ²_k = 1 for k ≥ 2.
#[derive(Debug, Clone)]
pub struct PveProfile {
    tau_sq: Vec<f64>,
}

impl PveProfile {
    /// τ²_k, 1-based.
    pub fn get(&self, k: usize) -> f64 {
        self.tau_sq[k - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.tau_sq
    }

    /// Smallest k with τ²_k at or above the target, if any.
    pub fn order_reaching(&self, target: f64) -> Option<usize> {
        self.tau_sq.iter().position(|&t| t >= target).map(|i| i + 1)
    }
}

pub fn pve(qf: &QuantileFunction, k_max: usize) -> Result<PveProfile> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("PVE truncation order must be >= 1".into()));
    }
    let grid = qf.grid();
    let weights = grid.weights();
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(weights).map(|((x, y), w)| w * x * y).sum()
    };
    let ones = vec![1.0; grid.resolution()];
    let mu = inner(qf.values(), &ones) / inner(&ones, &ones);
    let centered: Vec<f64> = qf.values().iter().map(|q| q - mu).collect();
    let denom = inner(&centered, &centered);
    let degenerate = denom <= 1e-20 * (1.0 + mu * mu);

    // The profile is defined through the residual of the projection onto the
    // span of the first k basis polynomials. Orthonormalizing that span under
    // the grid inner product keeps the residual energy nonincreasing by
    // construction, instead of only up to quadrature error.
    let mut tau_sq = Vec::with_capacity(k_max);
    tau_sq.push(0.0);
    if k_max >= 2 {
        let basis = LegendreBasis::new(k_max - 1)?;
        let rows = basis.eval_on_grid(grid);
        let mut residual = centered;
        let mut ortho: Vec<Vec<f64>> = vec![ones.iter().map(|v| v / inner(&ones, &ones).sqrt()).collect()];
        for k in 2..=k_max {
            if degenerate {
                tau_sq.push(1.0);
                continue;
            }
            let mut v = rows[k - 1].clone();
            let raw_norm_sq = inner(&v, &v);
            // Two subtraction passes keep the new direction orthogonal to
            // machine precision even for nearly dependent rows.
            for _ in 0..2 {
                for phi in &ortho {
                    let c = inner(&v, phi);
                    for (vi, pi) in v.iter_mut().zip(phi) {
                        *vi -= c * pi;
                    }
                }
            }
            let norm_sq = inner(&v, &v);
            if norm_sq <= 1e-20 * raw_norm_sq.max(1e-300) {
                // Direction already spanned (possible when the grid has fewer
                // points than the requested order); nothing more to explain.
                tau_sq.push(*tau_sq.last().unwrap());
                continue;
            }
            let phi: Vec<f64> = v.iter().map(|vi| vi / norm_sq.sqrt()).collect();
            let c = inner(&residual, &phi);
            for (ri, pi) in residual.iter_mut().zip(&phi) {
                *ri -= c * pi;
            }
            let res_sq = inner(&residual, &residual);
            tau_sq.push(1.0 - res_sq / denom);
            ortho.push(phi);
        }
    }
    Ok(PveProfile { tau_sq })
}

/// Raw moments from the quantile representation: μ'_m = ∫ Q(p)^m dp for
/// m = 1..=order.
pub fn regular_moments_from_quantile(qf: &QuantileFunction, order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(Error::InvalidArgument("moment order must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(order);
    let mut powers: Vec<f64> = vec![1.0; qf.values().len()];
    for _ in 1..=order {
        for (pw, q) in powers.iter_mut().zip(qf.values()) {
            *pw *= q;
        }
        out.push(qf.grid().integrate(&powers)?);
    }
    Ok(out)
}

/// Central moments c_2.. from raw moments μ'_1.. via the binomial
/// expansion c_k = Σ_j C(k,j)·μ'_j·(−μ'_1)^{k−j} (with μ'_0 = 1). The
/// result has one entry fewer than the input.
pub fn central_moments(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::InvalidArgument(
            "central moments need raw moments of order at least 2".into(),
        ));
    }
    let mu = raw[0];
    let l = raw.len();
    // Pascal triangle in f64; orders here are small.
    let mut binom = vec![vec![0.0; l + 1]; l + 1];
    for i in 0..=l {
        binom[i][0] = 1.0;
        for j in 1..=i {
            binom[i][j] = binom[i - 1][j - 1] + binom[i - 1][j];
        }
    }
    let augmented: Vec<f64> = std::iter::once(1.0).chain(raw.iter().copied()).collect();
    Ok((2..=l)
        .map(|k| {
            (0..=k).map(|j| binom[k][j] * augmented[j] * (-mu).powi((k - j) as i32)).sum()
        })
        .collect())
}
