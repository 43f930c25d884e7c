//! Thin singular value decomposition by one-sided cyclic Jacobi.
//!
//! The factorization drives every subspace computation in the crate: safety
//! projectors, task-specific adapter initialization, and the spectral pieces
//! of the drift and bound reports. One-sided Jacobi (Hestenes) is used
//! because it is simple, accurate at this scale, and fully deterministic:
//! fixed row-cyclic sweep order, fixed rotation formulas, and a fixed sign
//! convention mean identical input bits always give identical output bits.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative off-diagonal threshold: a column pair is considered orthogonal
/// when |a_p . a_q| <= TOL * |a_p| * |a_q|.
const JACOBI_TOL: f64 = 1e-12;

/// Hard cap on row-cyclic sweeps.
const MAX_SWEEPS: usize = 60;

/// Thin SVD of an `m x n` matrix with `k = min(m, n)`.
///
/// `u` is `m x k` and `v` is `n x k`, both with orthonormal columns;
/// `s` is non-negative and sorted non-increasing. Columns obey the sign
/// convention that the largest-magnitude entry of each `u` column is
/// non-negative (first such entry wins on ties).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// `U * diag(s) * V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut us = self.u.clone();
        for j in 0..k {
            for i in 0..us.rows() {
                us.set(i, j, us.get(i, j) * self.s[j]);
            }
        }
        us.matmul(&self.v.transpose()).expect("factor shapes agree")
    }

    /// Rank-`k` truncation `U_k * diag(s_k) * V_k^T`.
    pub fn truncate(&self, k: usize) -> Matrix {
        assert!(k <= self.s.len());
        let mut us = self.u.columns(0, k);
        for j in 0..k {
            for i in 0..us.rows() {
                us.set(i, j, us.get(i, j) * self.s[j]);
            }
        }
        us.matmul(&self.v.columns(0, k).transpose())
            .expect("factor shapes agree")
    }
}

/// Thin SVD. Requires at least one row and one column and finite entries.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::validation(format!(
            "svd requires a non-empty matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("svd input has non-finite entries"));
    }

    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (u_tall, s, v_small) = jacobi_tall(&work);

    let (mut u, mut v) = if transposed {
        (v_small, u_tall)
    } else {
        (u_tall, v_small)
    };
    apply_sign_convention(&mut u, &mut v);
    Ok(SvdResult { u, s, v })
}

/// First `k` columns of `svd(m).u`.
pub fn top_left_singular_vectors(m: &Matrix, k: usize) -> Result<Matrix> {
    let max_k = m.rows().min(m.cols());
    if k == 0 || k > max_k {
        return Err(Error::rank(format!(
            "k = {} out of range 1..={} for a {}x{} matrix",
            k,
            max_k,
            m.rows(),
            m.cols()
        )));
    }
    Ok(svd(m)?.u.columns(0, k))
}

/// Smallest singular value, i.e. the last entry of `svd(m).s`.
pub fn min_singular_value(m: &Matrix) -> Result<f64> {
    let result = svd(m)?;
    Ok(*result.s.last().expect("svd returns at least one value"))
}

/// One-sided Jacobi on a tall matrix (`rows >= cols`). Returns
/// `(U: rows x cols, s: cols, V: cols x cols)` with `s` sorted descending.
fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let rows = m.rows();
    let n = m.cols();
    debug_assert!(rows >= n);

    // Column-major working copies of A and V.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (app, aqq, apq) = column_moments(&a[p], &a[q]);
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;

                let zeta = (aqq - app) / (2.0 * apq);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;

                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; order them descending, keeping
    // the original column index as a tie-break so repeated values still give
    // a reproducible basis.
    let norms: Vec<f64> = a.iter().map(|col| l2_norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let s_max = s.first().copied().unwrap_or(0.0);
    let tiny = s_max * rows.max(n) as f64 * f64::EPSILON;

    let mut u = Matrix::zeros(rows, n);
    let mut deficient = Vec::new();
    for (new_j, &old_j) in order.iter().enumerate() {
        if norms[old_j] > tiny {
            for i in 0..rows {
                u.set(i, new_j, a[old_j][i] / norms[old_j]);
            }
        } else {
            deficient.push(new_j);
        }
    }
    complete_orthonormal(&mut u, &deficient);

    let mut v_out = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            v_out.set(i, new_j, v[old_j][i]);
        }
    }

    (u, s, v_out)
}

fn column_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut app = 0.0;
    let mut aqq = 0.0;
    let mut apq = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        app += x * x;
        aqq += y * y;
        apq += x * y;
    }
    (app, aqq, apq)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let col_p = &mut head[p];
    let col_q = &mut tail[0];
    for (x, y) in col_p.iter_mut().zip(col_q.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fills the listed columns of `u` with vectors orthonormal to all other
/// columns, chosen deterministically from the standard basis.
///
/// `deficient` must be ascending; earlier entries are filled first and count
/// as existing columns for later ones.
fn complete_orthonormal(u: &mut Matrix, deficient: &[usize]) {
    let rows = u.rows();
    let cols = u.cols();
    for (pos, &j) in deficient.iter().enumerate() {
        let filled: Vec<usize> = (0..cols)
            .filter(|&k| k != j && !deficient[pos..].contains(&k))
            .collect();

        // For orthonormal filled columns, the residual of basis vector e_i is
        // 1 - sum_k u[i,k]^2; pick the basis vector farthest from the span,
        // lowest index on ties.
        let mut best_i = 0;
        let mut best_residual = f64::MIN;
        for i in 0..rows {
            let projected: f64 = filled.iter().map(|&k| u.get(i, k) * u.get(i, k)).sum();
            let residual = 1.0 - projected;
            if residual > best_residual {
                best_residual = residual;
                best_i = i;
            }
        }

        let mut cand = vec![0.0; rows];
        cand[best_i] = 1.0;
        // Two Gram-Schmidt passes against the already-filled columns.
        for _ in 0..2 {
            for &k in &filled {
                let dot: f64 = (0..rows).map(|i| u.get(i, k) * cand[i]).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * u.get(i, k);
                }
            }
        }
        let norm = l2_norm(&cand);
        debug_assert!(norm > 0.0, "basis completion degenerated");
        for (i, c) in cand.iter().enumerate() {
            u.set(i, j, c / norm);
        }
    }
}

/// Makes the largest-magnitude entry of every `u` column non-negative,
/// scanning from row zero so ties resolve to the lowest index, and flips the
/// matching `v` column to keep the product unchanged.
fn apply_sign_convention(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best_i = 0;
        let mut best = u.get(0, j).abs();
        for i in 1..u.rows() {
            let mag = u.get(i, j).abs();
            if mag > best {
                best = mag;
                best_i = i;
            }
        }
        if u.get(best_i, j) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows() {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn orthonormality_defect(m: &Matrix) -> f64 {
        let gram = m.transpose().matmul(m).unwrap();
        gram.sub(&Matrix::identity(m.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_decomposes_to_identity() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert!(r.u.bit_eq(&Matrix::identity(2)));
        assert_eq!(r.s, vec![1.0, 1.0]);
        assert!(r.v.bit_eq(&Matrix::identity(2)));
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let m = Matrix::from_diag(&[3.0, 2.0]);
        let r = svd(&m).unwrap();
        assert_abs_diff_eq!(r.s[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.s[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.v.shape(), (3, 2));
        let err = r.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err < 1e-12 * m.frobenius_norm());
        assert!(orthonormality_defect(&r.u) < 1e-12);
        assert!(orthonormality_defect(&r.v) < 1e-12);
    }

    #[test]
    fn rank_deficient_min_singular_value_is_zero() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_abs_diff_eq!(r.s[0], 2.0, epsilon = 1e-12);
        assert!(r.s[1].abs() < 1e-12);
        assert!(min_singular_value(&m).unwrap() < 1e-12);
        // The kernel direction is completed, not left as noise.
        assert!(orthonormality_defect(&r.u) < 1e-12);
    }

    #[test]
    fn zero_matrix_gets_an_orthonormal_basis() {
        let m = Matrix::zeros(4, 3);
        let r = svd(&m).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0, 0.0]);
        assert!(orthonormality_defect(&r.u) < 1e-14);
        assert!(orthonormality_defect(&r.v) < 1e-14);
        assert_eq!(r.reconstruct().frobenius_norm(), 0.0);
    }

    #[test]
    fn top_left_singular_vectors_of_diagonal() {
        let m = Matrix::from_diag(&[3.0, 2.0]);
        let u1 = top_left_singular_vectors(&m, 1).unwrap();
        assert_abs_diff_eq!(u1.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u1.get(1, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_k_matches_svd_u() {
        let m = Matrix::from_rows(&[
            vec![1.0, -2.0, 0.5],
            vec![0.0, 3.0, 1.0],
            vec![2.0, 1.0, -1.0],
            vec![0.5, 0.5, 4.0],
        ])
        .unwrap();
        let full = top_left_singular_vectors(&m, 3).unwrap();
        assert!(full.bit_eq(&svd(&m).unwrap().u));
    }

    #[test]
    fn rank_out_of_range_is_an_error() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(
            top_left_singular_vectors(&m, 3),
            Err(Error::Rank(_))
        ));
        assert!(matches!(
            top_left_singular_vectors(&m, 0),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn min_singular_value_of_diagonal() {
        let m = Matrix::from_diag(&[3.0, 2.0]);
        assert_abs_diff_eq!(min_singular_value(&m).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sign_convention_pins_largest_entry_positive() {
        let m = Matrix::from_rows(&[vec![-3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let r = svd(&m).unwrap();
        for j in 0..2 {
            let col = r.u.col(j);
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            let max_abs = col.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert_abs_diff_eq!(max, max_abs, epsilon = 1e-15);
        }
        let err = r.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn svd_is_bitwise_deterministic() {
        let m = Matrix::from_rows(&[
            vec![0.3, -1.2, 0.7, 2.2],
            vec![1.1, 0.4, -0.6, 0.9],
            vec![-2.0, 0.8, 1.5, -0.1],
        ])
        .unwrap();
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert!(a.u.bit_eq(&b.u));
        assert!(a.v.bit_eq(&b.v));
        assert!(a.s.iter().zip(&b.s).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
