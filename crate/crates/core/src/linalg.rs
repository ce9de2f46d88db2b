//! Dense linear-algebra helpers: conversions between ndarray and nalgebra,
//! symmetric positive-definite solves with diagonal regularization, and
//! truncated singular value decompositions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;

use crate::error::{Error, Result};

pub(crate) fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().cloned())
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Cholesky factorization of a symmetric positive-definite system. When the
/// plain factorization fails, an escalating ridge (1e-10, 1e-8, 1e-6, 1e-4
/// times the mean diagonal) is added before giving up; the applied ridge is
/// recorded so callers can surface it.
pub(crate) struct SpdSolver {
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
}

impl SpdSolver {
    pub(crate) fn new(h: &DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = Cholesky::new(h.clone()) {
            return Ok(SpdSolver { chol, ridge: 0.0 });
        }
        let n = h.nrows();
        let mean_diag = (0..n).map(|i| h[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
        let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        for exponent in [-10i32, -8, -6, -4] {
            let ridge = base * 10f64.powi(exponent);
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += ridge;
            }
            if let Some(chol) = Cholesky::new(damped) {
                return Ok(SpdSolver { chol, ridge });
            }
        }
        Err(Error::SingularSystem)
    }

    pub(crate) fn ridge(&self) -> f64 {
        self.ridge
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Leading `rank` singular triplets of a rectangular matrix, ordered by
/// decreasing singular value. Returns (u, sigma, v_t) with u of shape
/// (nrows, r), sigma of length r, v_t of shape (r, ncols), where r is
/// `rank` capped at min(nrows, ncols).
pub(crate) fn svd_trunc(a: &Array2<f64>, rank: usize) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
    let m = to_nalgebra(a);
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(Error::SingularSystem)?;
    let v_t = svd.v_t.ok_or(Error::SingularSystem)?;
    let sigma = svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let r = rank.min(sigma.len());
    let mut u_out = Array2::zeros((a.nrows(), r));
    let mut vt_out = Array2::zeros((r, a.ncols()));
    let mut s_out = Vec::with_capacity(r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        s_out.push(sigma[idx]);
        for i in 0..a.nrows() {
            u_out[[i, k]] = u[(i, idx)];
        }
        for j in 0..a.ncols() {
            vt_out[[k, j]] = v_t[(idx, j)];
        }
    }
    Ok((u_out, s_out, vt_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn solves_a_small_definite_system() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let solver = SpdSolver::new(&h).unwrap();
        assert_eq!(solver.ridge(), 0.0);
        let x = solver.solve(&DVector::from_row_slice(&[1.0, 2.0]));
        assert_abs_diff_eq!(x[0], 1.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 7.0 / 11.0, epsilon = 1e-12);
        let inv = solver.inverse();
        assert_abs_diff_eq!(inv[(0, 0)], 3.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_system_gets_a_ridge() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let solver = SpdSolver::new(&h).unwrap();
        assert!(solver.ridge() > 0.0);
        let x = solver.solve(&DVector::from_row_slice(&[2.0, 2.0]));
        // Consistent right-hand side: the damped solution stays near [1, 1].
        assert_abs_diff_eq!(x[0] + x[1], 2.0, epsilon = 1e-3);
    }

    #[test]
    fn indefinite_system_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(SpdSolver::new(&h), Err(Error::SingularSystem)));
    }

    #[test]
    fn truncated_svd_orders_singular_values() {
        let a = array![[3.0, 0.0], [0.0, 5.0], [0.0, 0.0]];
        let (u, s, vt) = svd_trunc(&a, 2).unwrap();
        assert_abs_diff_eq!(s[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 3.0, epsilon = 1e-12);
        // Reconstruction at full rank is exact.
        let mut recon = Array2::<f64>::zeros((3, 2));
        for k in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    recon[[i, j]] += u[[i, k]] * s[k] * vt[[k, j]];
                }
            }
        }
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        let (_, s1, _) = svd_trunc(&a, 1).unwrap();
        assert_eq!(s1.len(), 1);
        assert_abs_diff_eq!(s1[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn conversions_round_trip() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let round = from_nalgebra(&to_nalgebra(&a));
        assert_eq!(a, round);
    }
}
