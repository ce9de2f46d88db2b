//! B-spline bases on closed intervals, roughness penalties, and
//! tensor-product design rows for distribution-on-scalar effects.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::quantiles::QuantileGrid;

/// Square symmetric positive semidefinite roughness matrix.
pub type PenaltyMatrix = Array2<f64>;

/// Gauss–Legendre nodes and weights on [−1, 1], exact for polynomials of
/// degree 2n−1. Nodes are found by Newton iteration from the Chebyshev
/// initial guess; everything is deterministic.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 1..=n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(z) and its derivative.
            let mut p0 = 1.0;
            let mut p1 = z;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            dp = if (z * z - 1.0).abs() < 1e-300 {
                // Endpoints never arise from the Chebyshev guess; guard anyway.
                0.5 * n as f64 * (n as f64 + 1.0)
            } else {
                n as f64 * (z * p1 - p0) / (z * z - 1.0)
            };
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes[i - 1] = -z;
        nodes[n - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i - 1] = w;
        weights[n - i] = w;
    }
    (nodes, weights)
}

/// B-spline basis of a given degree on [lo, hi] with equally spaced
/// interior knots and full-multiplicity boundary knots. `size` is the
/// number of basis functions; the basis is a partition of unity on the
/// domain and evaluation clamps points into it.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    degree: usize,
    size: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(domain: (f64, f64), degree: usize, size: usize) -> Result<Self> {
        let (lo, hi) = domain;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidDomain(format!(
                "spline domain [{lo}, {hi}] must be a finite nondegenerate interval"
            )));
        }
        if size < degree + 1 {
            return Err(Error::BasisTooSmall { degree, got: size, min: degree + 1 });
        }
        let spans = size - degree;
        let h = (hi - lo) / spans as f64;
        let n_knots = size + degree + 1;
        let knots: Vec<f64> = (0..n_knots)
            .map(|i| {
                if i <= degree {
                    lo
                } else if i >= size {
                    hi
                } else {
                    lo + (i - degree) as f64 * h
                }
            })
            .collect();
        Ok(SplineBasis { degree, size, knots })
    }

    /// Cubic basis, the default for coefficient functions.
    pub fn cubic(domain: (f64, f64), size: usize) -> Result<Self> {
        SplineBasis::new(domain, 3, size)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Greville abscissae: knot averages at which a spline with those
    /// coefficients interpolates linear functions. For degree 0 the span
    /// midpoints play the same role.
    pub fn greville(&self) -> Vec<f64> {
        if self.degree == 0 {
            return (0..self.size).map(|k| 0.5 * (self.knots[k] + self.knots[k + 1])).collect();
        }
        (0..self.size)
            .map(|k| {
                self.knots[k + 1..k + 1 + self.degree].iter().sum::<f64>() / self.degree as f64
            })
            .collect()
    }

    fn clamp(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        x.clamp(lo, hi)
    }

    // Index j of the nonempty span with t_j <= x < t_{j+1} (rightmost span
    // for x at the upper boundary). Valid for any working degree because
    // boundary knots carry full multiplicity.
    fn span(&self, x: f64) -> usize {
        let last = self.size - 1;
        if x >= self.knots[self.size] {
            return last;
        }
        let mut j = self.degree;
        while j < last && x >= self.knots[j + 1] {
            j += 1;
        }
        j
    }

    // Values at x of all basis functions of degree q over this knot vector
    // (there are size + degree − q of them), via the triangular recurrence.
    fn all_values_degree(&self, x: f64, q: usize) -> Vec<f64> {
        let x = self.clamp(x);
        let span = self.span(x);
        let t = &self.knots;
        let mut vals = vec![0.0; q + 1];
        vals[0] = 1.0;
        let mut left = vec![0.0; q + 1];
        let mut right = vec![0.0; q + 1];
        for j in 1..=q {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = vals[r] / denom;
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        let count = self.size + self.degree - q;
        let mut out = vec![0.0; count];
        for (offset, v) in vals.into_iter().enumerate() {
            out[span - q + offset] = v;
        }
        out
    }

    /// Values of all `size` basis functions at x (clamped into the domain).
    pub fn eval_all(&self, x: f64) -> Vec<f64> {
        self.all_values_degree(x, self.degree)
    }

    /// Derivatives of all basis functions at x: one vector per order
    /// 0..=n_deriv. Orders beyond the degree are identically zero.
    pub fn eval_all_derivs(&self, x: f64, n_deriv: usize) -> Vec<Vec<f64>> {
        (0..=n_deriv).map(|m| self.derivative_values(x, m)).collect()
    }

    fn derivative_values(&self, x: f64, m: usize) -> Vec<f64> {
        if m == 0 {
            return self.eval_all(x);
        }
        if m > self.degree {
            return vec![0.0; self.size];
        }
        let p = self.degree;
        let t = &self.knots;
        // Start from degree p−m values and lift m times through the
        // derivative recurrence D B_{i,q} = q(v_i/(t_{i+q}−t_i) − v_{i+1}/(t_{i+q+1}−t_{i+1})).
        let mut v = self.all_values_degree(x, p - m);
        for step in 1..=m {
            let q = p - m + step;
            let len = self.size + m - step;
            let mut out = vec![0.0; len];
            for (i, o) in out.iter_mut().enumerate() {
                let d1 = t[i + q] - t[i];
                let d2 = t[i + q + 1] - t[i + 1];
                let a = if d1 > 0.0 { v[i] / d1 } else { 0.0 };
                let b = if d2 > 0.0 { v[i + 1] / d2 } else { 0.0 };
                *o = q as f64 * (a - b);
            }
            v = out;
        }
        v
    }

    /// Rows of basis values at each point (len(xs) × size).
    pub fn design_matrix(&self, xs: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((xs.len(), self.size));
        for (i, &x) in xs.iter().enumerate() {
            for (k, v) in self.eval_all(x).into_iter().enumerate() {
                m[[i, k]] = v;
            }
        }
        m
    }
}

/// Exact integral penalty P_{kl} = ∫ θ_k''(x) θ_l''(x) dx over the basis
/// domain, accumulated span by span with Gauss quadrature that is exact for
/// the piecewise-polynomial integrand. Bases below degree 2 have identically
/// zero curvature and get a zero matrix.
pub fn second_derivative_penalty(basis: &SplineBasis) -> PenaltyMatrix {
    let size = basis.size();
    let mut penalty = Array2::zeros((size, size));
    if basis.degree() < 2 {
        return penalty;
    }
    let (nodes, weights) = gauss_legendre(basis.degree().max(2));
    let t = basis.knots();
    for j in basis.degree()..size {
        let (a, b) = (t[j], t[j + 1]);
        if b <= a {
            continue;
        }
        for (z, w) in nodes.iter().zip(&weights) {
            let x = 0.5 * (a + b) + 0.5 * (b - a) * z;
            let wq = 0.5 * (b - a) * w;
            let d2 = &basis.eval_all_derivs(x, 2)[2];
            for k in 0..size {
                if d2[k] == 0.0 {
                    continue;
                }
                for l in 0..size {
                    penalty[[k, l]] += wq * d2[k] * d2[l];
                }
            }
        }
    }
    penalty
}

/// Discrete curvature penalty D₂ᵀD₂ from the second-difference matrix with
/// rows (1, −2, 1); its null space holds coefficient vectors linear in the
/// index.
pub fn second_difference_penalty(size: usize) -> Result<PenaltyMatrix> {
    if size < 3 {
        return Err(Error::BasisTooSmall { degree: 2, got: size, min: 3 });
    }
    let mut d = Array2::zeros((size - 2, size));
    for r in 0..size - 2 {
        d[[r, r]] = 1.0;
        d[[r, r + 1]] = -2.0;
        d[[r, r + 2]] = 1.0;
    }
    Ok(d.t().dot(&d))
}

/// Kronecker product a ⊗ b.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let scale = a[[i, j]];
            if scale == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = scale * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Anisotropic tensor-product penalty λ_q·(P_q ⊗ I_L) + λ_p·(I_K ⊗ P_p)
/// for a K×L coefficient grid vectorized with the first (q) index major.
pub fn kronecker_penalty(
    penalty_q: &PenaltyMatrix,
    penalty_p: &PenaltyMatrix,
    lambda_q: f64,
    lambda_p: f64,
) -> Result<PenaltyMatrix> {
    for l in [lambda_q, lambda_p] {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::NegativeLambda(l));
        }
    }
    let k = penalty_q.nrows();
    let l = penalty_p.nrows();
    if penalty_q.ncols() != k || penalty_p.ncols() != l {
        return Err(Error::InvalidModel("penalty matrices must be square".into()));
    }
    let eye_k = Array2::eye(k);
    let eye_l = Array2::eye(l);
    let mut out = kron(penalty_q, &eye_l);
    out.mapv_inplace(|v| v * lambda_q);
    let second = kron(&eye_k, penalty_p);
    Ok(out + &(second * lambda_p))
}

/// One subject's tensor-product design row: entry (k·L + ℓ) is
/// ∫ B_k(Q(p)) C_ℓ(p) dp on the grid, for the q-axis basis B and p-axis
/// basis C. Quantile values outside the q-basis domain are clamped to it.
pub fn tensor_design_row(
    q_values: &[f64],
    basis_q: &SplineBasis,
    basis_p: &SplineBasis,
    grid: &QuantileGrid,
) -> Result<Vec<f64>> {
    if q_values.len() != grid.resolution() {
        return Err(Error::LengthMismatch { expected: grid.resolution(), found: q_values.len() });
    }
    let k = basis_q.size();
    let l = basis_p.size();
    let mut row = vec![0.0; k * l];
    for (j, (&q, &p)) in q_values.iter().zip(grid.levels()).enumerate() {
        let w = grid.weights()[j];
        let bq = basis_q.eval_all(q);
        let bp = basis_p.eval_all(p);
        for (ki, &bqv) in bq.iter().enumerate() {
            if bqv == 0.0 {
                continue;
            }
            for (li, &bpv) in bp.iter().enumerate() {
                row[ki * l + li] += w * bqv * bpv;
            }
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gauss_rule_integrates_polynomials_exactly() {
        for n in 1..=8usize {
            let (nodes, weights) = gauss_legendre(n);
            for power in 0..=(2 * n - 1) {
                let got: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(x, w)| w * x.powi(power as i32))
                    .sum();
                let exact = if power % 2 == 1 { 0.0 } else { 2.0 / (power as f64 + 1.0) };
                assert_abs_diff_eq!(got, exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn knot_vector_layout() {
        let b = SplineBasis::cubic((0.0, 1.0), 7).unwrap();
        // 7 + 3 + 1 = 11 knots: four copies of each boundary, three interior.
        assert_eq!(b.knots().len(), 11);
        assert_eq!(&b.knots()[..4], &[0.0; 4]);
        assert_eq!(&b.knots()[7..], &[1.0; 4]);
        assert_abs_diff_eq!(b.knots()[4], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(b.knots()[5], 0.50, epsilon = 1e-15);
        assert_abs_diff_eq!(b.knots()[6], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn construction_rejects_bad_arguments() {
        assert!(matches!(
            SplineBasis::cubic((0.0, 1.0), 3),
            Err(Error::BasisTooSmall { min: 4, .. })
        ));
        assert!(SplineBasis::new((1.0, 1.0), 3, 8).is_err());
        assert!(SplineBasis::new((0.0, f64::INFINITY), 3, 8).is_err());
        assert!(SplineBasis::new((0.0, 1.0), 0, 1).is_ok());
    }

    #[test]
    fn degree_zero_basis_gives_bin_indicators() {
        let b = SplineBasis::new((0.0, 1.0), 0, 4).unwrap();
        for (x, expect_idx) in [(0.1, 0), (0.3, 1), (0.6, 2), (0.99, 3), (1.0, 3)] {
            let v = b.eval_all(x);
            for (k, val) in v.iter().enumerate() {
                let expect = if k == expect_idx { 1.0 } else { 0.0 };
                assert_eq!(*val, expect, "x={x} k={k}");
            }
        }
    }

    #[test]
    fn degree_one_basis_is_the_hat_function() {
        let b = SplineBasis::new((0.0, 2.0), 1, 3).unwrap();
        // Middle hat peaks at x = 1 and is 0.5 at x = 0.5.
        assert_abs_diff_eq!(b.eval_all(1.0)[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b.eval_all(0.5)[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(b.eval_all(0.5)[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn evaluation_clamps_outside_the_domain() {
        let b = SplineBasis::cubic((0.0, 1.0), 6).unwrap();
        assert_eq!(b.eval_all(-3.0), b.eval_all(0.0));
        assert_eq!(b.eval_all(4.0), b.eval_all(1.0));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let b = SplineBasis::cubic((0.0, 1.0), 8).unwrap();
        let h = 1e-6;
        for &x in &[0.13, 0.377, 0.59, 0.842] {
            let derivs = b.eval_all_derivs(x, 2);
            let up = b.eval_all(x + h);
            let down = b.eval_all(x - h);
            for k in 0..b.size() {
                let fd1 = (up[k] - down[k]) / (2.0 * h);
                assert_abs_diff_eq!(derivs[1][k], fd1, epsilon = 1e-5);
                let fd2 = (up[k] - 2.0 * derivs[0][k] + down[k]) / (h * h);
                assert_abs_diff_eq!(derivs[2][k], fd2, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn cubic_basis_reproduces_quadratics() {
        // Marsden: with cubic knots, coefficients e_2(t_{k+1},t_{k+2},t_{k+3})/3
        // reproduce x² exactly; Greville abscissae reproduce x.
        let b = SplineBasis::cubic((0.0, 2.0), 9).unwrap();
        let t = b.knots();
        let coef_sq: Vec<f64> = (0..b.size())
            .map(|k| {
                let (a, c, d) = (t[k + 1], t[k + 2], t[k + 3]);
                (a * c + a * d + c * d) / 3.0
            })
            .collect();
        let coef_lin = b.greville();
        for &x in &[0.0, 0.21, 0.77, 1.3, 1.99, 2.0] {
            let vals = b.eval_all(x);
            let sq: f64 = vals.iter().zip(&coef_sq).map(|(v, c)| v * c).sum();
            let lin: f64 = vals.iter().zip(&coef_lin).map(|(v, c)| v * c).sum();
            assert_abs_diff_eq!(sq, x * x, epsilon = 1e-10);
            assert_abs_diff_eq!(lin, x, epsilon = 1e-10);
        }
    }

    #[test]
    fn curvature_penalty_annihilates_affine_splines_and_measures_quadratics() {
        let b = SplineBasis::cubic((0.0, 1.0), 6).unwrap();
        let p = second_derivative_penalty(&b);
        let quad_form = |theta: &[f64]| -> f64 {
            let mut acc = 0.0;
            for k in 0..theta.len() {
                for l in 0..theta.len() {
                    acc += theta[k] * p[[k, l]] * theta[l];
                }
            }
            acc
        };
        let ones = vec![1.0; b.size()];
        assert_abs_diff_eq!(quad_form(&ones), 0.0, epsilon = 1e-10);
        let lin = b.greville();
        assert_abs_diff_eq!(quad_form(&lin), 0.0, epsilon = 1e-10);
        // Coefficients of x² have curvature 2, so ∫(f'')² over [0,1] is 4.
        let t = b.knots();
        let sq: Vec<f64> = (0..b.size())
            .map(|k| (t[k + 1] * t[k + 2] + t[k + 1] * t[k + 3] + t[k + 2] * t[k + 3]) / 3.0)
            .collect();
        assert_abs_diff_eq!(quad_form(&sq), 4.0, epsilon = 1e-8);
        // Same function over [0,2] integrates curvature 4 over twice the length.
        let b2 = SplineBasis::cubic((0.0, 2.0), 6).unwrap();
        let p2 = second_derivative_penalty(&b2);
        let t2 = b2.knots();
        let sq2: Vec<f64> = (0..b2.size())
            .map(|k| (t2[k + 1] * t2[k + 2] + t2[k + 1] * t2[k + 3] + t2[k + 2] * t2[k + 3]) / 3.0)
            .collect();
        let mut acc = 0.0;
        for k in 0..sq2.len() {
            for l in 0..sq2.len() {
                acc += sq2[k] * p2[[k, l]] * sq2[l];
            }
        }
        assert_abs_diff_eq!(acc, 8.0, epsilon = 1e-8);
    }

    #[test]
    fn low_degree_bases_have_zero_curvature_penalty() {
        let b = SplineBasis::new((0.0, 1.0), 1, 5).unwrap();
        let p = second_derivative_penalty(&b);
        assert_eq!(p.iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn difference_penalty_shape_and_null_space() {
        let p = second_difference_penalty(5).unwrap();
        assert_eq!(p.dim(), (5, 5));
        let indexed_affine: Vec<f64> = (0..5).map(|k| 2.0 + 0.7 * k as f64).collect();
        let mut quad = 0.0;
        for k in 0..5 {
            for l in 0..5 {
                quad += indexed_affine[k] * p[[k, l]] * indexed_affine[l];
            }
        }
        assert_abs_diff_eq!(quad, 0.0, epsilon = 1e-12);
        assert!(second_difference_penalty(2).is_err());
    }

    #[test]
    fn kronecker_penalty_scalar_case_and_dimensions() {
        let pq = ndarray::array![[2.0]];
        let pp = ndarray::array![[5.0]];
        let combined = kronecker_penalty(&pq, &pp, 0.5, 2.0).unwrap();
        assert_eq!(combined.dim(), (1, 1));
        assert_abs_diff_eq!(combined[[0, 0]], 11.0, epsilon = 1e-15);

        let pq = second_difference_penalty(4).unwrap();
        let pp = second_difference_penalty(3).unwrap();
        let combined = kronecker_penalty(&pq, &pp, 1.0, 1.0).unwrap();
        assert_eq!(combined.dim(), (12, 12));
        assert!(kronecker_penalty(&pq, &pp, -1.0, 0.0).is_err());
    }

    #[test]
    fn tensor_row_sums_to_one_for_in_domain_values() {
        // Both marginal bases are partitions of unity, so the row sums to
        // ∫ 1 dp = 1 whenever the quantile values stay inside the domain.
        let grid = QuantileGrid::midpoint(50).unwrap();
        let bq = SplineBasis::cubic((-1.0, 2.0), 7).unwrap();
        let bp = SplineBasis::cubic((0.0, 1.0), 5).unwrap();
        let q_values: Vec<f64> = grid.levels().iter().map(|p| -0.5 + 2.0 * p).collect();
        let row = tensor_design_row(&q_values, &bq, &bp, &grid).unwrap();
        assert_eq!(row.len(), 35);
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(tensor_design_row(&q_values[1..], &bq, &bp, &grid).is_err());
    }

    proptest! {
        #[test]
        fn basis_is_a_partition_of_unity(
            degree in 0usize..4,
            extra in 1usize..6,
            x in 0.0f64..1.0,
        ) {
            let b = SplineBasis::new((0.0, 1.0), degree, degree + extra).unwrap();
            let v = b.eval_all(x);
            let sum: f64 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&val| val >= -1e-14));
        }

        #[test]
        fn first_derivatives_sum_to_zero(
            x in 0.01f64..0.99,
            size in 4usize..10,
        ) {
            let b = SplineBasis::cubic((0.0, 1.0), size).unwrap();
            let d1 = &b.eval_all_derivs(x, 1)[1];
            let sum: f64 = d1.iter().sum();
            prop_assert!(sum.abs() < 1e-9);
        }

        #[test]
        fn combined_penalty_is_positive_semidefinite(
            lq in 0.0f64..10.0,
            lp in 0.0f64..10.0,
            coefs in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let pq = second_difference_penalty(4).unwrap();
            let pp = second_difference_penalty(3).unwrap();
            let combined = kronecker_penalty(&pq, &pp, lq, lp).unwrap();
            let mut quad = 0.0;
            for k in 0..12 {
                for l in 0..12 {
                    quad += coefs[k] * combined[[k, l]] * coefs[l];
                }
            }
            prop_assert!(quad >= -1e-9);
        }
    }
}
