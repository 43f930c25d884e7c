//! Independent reference implementations.
//!
//! Everything here re-derives a quantity by a different route than the
//! production code: naive scalar loops instead of `Matrix::matmul`, a
//! two-sided Jacobi eigensolver on the Gram matrix instead of the one-sided
//! SVD, power iteration instead of a full decomposition. The test suites and
//! the `selftest` command compare production results against these; nothing
//! here may call the code paths it is meant to check.

use rand::Rng;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{Activation, ToyModel};
use crate::train::{loss_and_output_grad, LossKind};

/// Triple-loop matrix product, index order (i, j, k), no blocking.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Symmetric eigendecomposition by classic two-sided cyclic Jacobi.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted descending
/// and eigenvectors as the matching columns.
pub fn jacobi_eigen_symmetric(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    assert_eq!(n, m.cols(), "eigensolver needs a square matrix");
    let mut a = m.clone();
    let mut v = Matrix::identity(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.frobenius_norm()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;

                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.get(p, i);
                    let aqi = a.get(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .unwrap()
            .then(i.cmp(&j))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new_j, v.get(i, old_j));
        }
    }
    (eigenvalues, vectors)
}

/// Singular values via the Gram matrix: square roots of the eigenvalues of
/// `M^T M` (clamped at zero), sorted descending.
pub fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let gram = naive_matmul(&m.transpose(), m);
    let (eigenvalues, _) = jacobi_eigen_symmetric(&gram);
    eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect()
}

/// Top-`k` left singular vectors as the dominant eigenvectors of `M M^T`.
pub fn gram_left_vectors(m: &Matrix, k: usize) -> Matrix {
    let gram = naive_matmul(m, &m.transpose());
    let (_, vectors) = jacobi_eigen_symmetric(&gram);
    vectors.columns(0, k)
}

/// Full SVD assembled from the Gram-matrix eigendecomposition:
/// `V` from `eig(M^T M)`, `s = sqrt(eigenvalues)`, `U = M V / s`.
/// Only valid when all returned singular values are well separated from zero.
pub fn gram_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let gram = naive_matmul(&m.transpose(), m);
    let (eigenvalues, v) = jacobi_eigen_symmetric(&gram);
    let s: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mv = naive_matmul(m, &v);
    let mut u = Matrix::zeros(m.rows(), s.len());
    for j in 0..s.len() {
        assert!(s[j] > 0.0, "gram_svd needs strictly positive singular values");
        for i in 0..m.rows() {
            u.set(i, j, mv.get(i, j) / s[j]);
        }
    }
    (u, s, v)
}

/// Top-`k` left singular vectors by power iteration on `M M^T` with
/// deflation of found directions.
pub fn power_iteration_left_vectors(m: &Matrix, k: usize, iters: usize) -> Matrix {
    let rows = m.rows();
    let mut work = m.clone();
    let mut u = Matrix::zeros(rows, k);
    for j in 0..k {
        // Deterministic non-degenerate start vector.
        let mut vec: Vec<f64> = (0..rows).map(|i| 1.0 + (i as f64) * 0.37).collect();
        normalize(&mut vec);
        for _ in 0..iters {
            let mut next = apply_mmt(&work, &vec);
            let norm = slice_norm(&next);
            if norm == 0.0 {
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            vec = next;
        }
        // sigma = |M^T u|; deflate M <- M - u (u^T M).
        let mut ut_m = vec![0.0; work.cols()];
        for c in 0..work.cols() {
            ut_m[c] = (0..rows).map(|i| vec[i] * work.get(i, c)).sum();
        }
        for i in 0..rows {
            for c in 0..work.cols() {
                work.set(i, c, work.get(i, c) - vec[i] * ut_m[c]);
            }
        }
        for i in 0..rows {
            u.set(i, j, vec[i]);
        }
    }
    u
}

fn apply_mmt(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut mt_v = vec![0.0; m.cols()];
    for c in 0..m.cols() {
        mt_v[c] = (0..m.rows()).map(|i| m.get(i, c) * v[i]).sum();
    }
    let mut out = vec![0.0; m.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m.cols()).map(|c| m.get(i, c) * mt_v[c]).sum();
    }
    out
}

fn slice_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = slice_norm(v);
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal-column matrices of equal width.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape().0, b.shape().0);
    assert_eq!(a.cols(), b.cols());
    let cross = naive_matmul(&a.transpose(), b);
    let gram = naive_matmul(&cross.transpose(), &cross);
    let (eigenvalues, _) = jacobi_eigen_symmetric(&gram);
    // Cosines of principal angles are the singular values of A^T B; the
    // largest angle comes from the smallest cosine.
    let min_cos = eigenvalues
        .last()
        .map(|&l| l.max(0.0).sqrt())
        .unwrap_or(1.0);
    min_cos.clamp(-1.0, 1.0).acos()
}

/// Random orthonormal-column matrix (`rows x k`) by Gram-Schmidt over
/// Gaussian draws; used to sample alternative projectors.
pub fn random_orthonormal<R: Rng>(rows: usize, k: usize, rng: &mut R) -> Matrix {
    assert!(k <= rows);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut cand: Vec<f64> = (0..rows)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z
            })
            .collect();
        for _ in 0..2 {
            let existing = cols.clone();
            for col in &existing {
                let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (c, e) in cand.iter_mut().zip(col) {
                    *c -= dot * e;
                }
            }
        }
        let norm = slice_norm(&cand);
        if norm > 1e-8 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            cols.push(cand);
        }
    }
    let mut out = Matrix::zeros(rows, k);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

/// `I - Q Q^T` for an orthonormal-column `Q`.
pub fn complement_projector(q: &Matrix) -> Matrix {
    let outer = naive_matmul(q, &q.transpose());
    Matrix::identity(q.rows()).sub(&outer).expect("square shapes")
}

/// Scalar-by-scalar forward pass over effective weights: plain nested loops,
/// no matrix routines. Activation applies between layers, not after the last.
pub fn scalar_reference_forward(
    weights: &[Matrix],
    activation: Activation,
    x: &Matrix,
) -> Matrix {
    let mut current: Vec<Vec<f64>> = (0..x.cols())
        .map(|j| (0..x.rows()).map(|i| x.get(i, j)).collect())
        .collect();
    let last = weights.len() - 1;
    for (idx, w) in weights.iter().enumerate() {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(current.len());
        for col in &current {
            let mut out = vec![0.0; w.rows()];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, v) in col.iter().enumerate() {
                    acc += w.get(i, j) * v;
                }
                *o = acc;
            }
            if idx < last {
                for o in out.iter_mut() {
                    *o = match activation {
                        Activation::Tanh => o.tanh(),
                        Activation::Relu => o.max(0.0),
                        Activation::Identity => *o,
                    };
                }
            }
            next.push(out);
        }
        current = next;
    }
    let rows = current[0].len();
    let mut out = Matrix::zeros(rows, current.len());
    for (j, col) in current.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

fn batch_loss(model: &ToyModel, inputs: &Matrix, targets: &Matrix, kind: LossKind) -> Result<f64> {
    let (outputs, _) = model.forward(inputs, false)?;
    loss_and_output_grad(&outputs, targets, kind).map(|(loss, _)| loss)
}

/// Central finite differences (`(L(p+h) - L(p-h)) / 2h`) over every adapter
/// factor entry. Returns `(d_a, d_b)` per adapted layer, `None` elsewhere.
pub fn fd_adapter_gradients(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
    kind: LossKind,
    h: f64,
) -> Result<Vec<Option<(Matrix, Matrix)>>> {
    let mut out = Vec::with_capacity(model.layers.len());
    for layer_idx in 0..model.layers.len() {
        if model.layers[layer_idx].adapter.is_none() {
            out.push(None);
            continue;
        }
        let mut work = model.clone();
        let (a_shape, b_shape) = {
            let slot = work.layers[layer_idx].adapter.as_ref().unwrap();
            (slot.a.shape(), slot.b.shape())
        };

        let mut d_a = Matrix::zeros(a_shape.0, a_shape.1);
        for idx in 0..a_shape.0 * a_shape.1 {
            let original = work.layers[layer_idx].adapter.as_ref().unwrap().a.data()[idx];
            work.layers[layer_idx].adapter.as_mut().unwrap().a.data_mut()[idx] = original + h;
            let plus = batch_loss(&work, inputs, targets, kind)?;
            work.layers[layer_idx].adapter.as_mut().unwrap().a.data_mut()[idx] = original - h;
            let minus = batch_loss(&work, inputs, targets, kind)?;
            work.layers[layer_idx].adapter.as_mut().unwrap().a.data_mut()[idx] = original;
            d_a.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }

        let mut d_b = Matrix::zeros(b_shape.0, b_shape.1);
        for idx in 0..b_shape.0 * b_shape.1 {
            let original = work.layers[layer_idx].adapter.as_ref().unwrap().b.data()[idx];
            work.layers[layer_idx].adapter.as_mut().unwrap().b.data_mut()[idx] = original + h;
            let plus = batch_loss(&work, inputs, targets, kind)?;
            work.layers[layer_idx].adapter.as_mut().unwrap().b.data_mut()[idx] = original - h;
            let minus = batch_loss(&work, inputs, targets, kind)?;
            work.layers[layer_idx].adapter.as_mut().unwrap().b.data_mut()[idx] = original;
            d_b.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }

        out.push(Some((d_a, d_b)));
    }
    Ok(out)
}

/// `max_ij |analytic - reference| / (1e-8 + |reference|)`.
pub fn max_gradient_rel_error(analytic: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), reference.shape());
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, f)| (a - f).abs() / (1e-8 + f.abs()))
        .fold(0.0, f64::max)
}
