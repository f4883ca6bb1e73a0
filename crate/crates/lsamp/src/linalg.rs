//! Minimal dense linear-algebra helpers.
//!
//! The solvers only need singular values (rank selection), orthonormality
//! diagnostics, and subspace angles for tests — small enough that a
//! self-contained one-sided Jacobi SVD beats pulling in a LAPACK binding.

use ndarray::{Array1, Array2};

/// Frobenius norm.
pub fn fro_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest absolute deviation of `AᵀA` from the identity.
pub fn orthonormality_error(a: &Array2<f64>) -> f64 {
    let gram = a.t().dot(a);
    let mut worst = 0.0f64;
    for ((i, j), &v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

/// Singular values in descending order, computed by one-sided Jacobi.
///
/// One-sided Jacobi keeps full relative accuracy on small singular values,
/// which the rank diagnostics rely on. The matrix is transposed internally
/// so rotations act on the shorter side.
pub fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    let work = if a.nrows() >= a.ncols() {
        a.clone()
    } else {
        a.t().to_owned()
    };
    let mut cols: Vec<Array1<f64>> = work.columns().into_iter().map(|c| c.to_owned()).collect();
    jacobi_orthogonalize(&mut cols);
    let mut sv: Vec<f64> = cols.iter().map(|c| c.dot(c).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

fn jacobi_orthogonalize(cols: &mut [Array1<f64>]) {
    let n = cols.len();
    let tol = 1e-14;
    for _sweep in 0..40 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = cols[p].dot(&cols[p]);
                let beta = cols[q].dot(&cols[q]);
                let gamma = cols[p].dot(&cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..cols[p].len() {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// Orthonormal basis of the row space via modified Gram-Schmidt with
/// re-orthogonalization. Rows that are numerically dependent are dropped.
pub fn orthonormal_rows(a: &Array2<f64>) -> Array2<f64> {
    let scale = fro_norm(a).max(1e-300);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in a.rows() {
        let mut v = row.to_owned();
        for _ in 0..2 {
            for b in &basis {
                let proj = v.dot(b);
                v = &v - &(b * proj);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 * scale {
            basis.push(v / norm);
        }
    }
    let k = basis.len();
    let n = a.ncols();
    let mut out = Array2::zeros((k, n));
    for (i, b) in basis.into_iter().enumerate() {
        out.row_mut(i).assign(&b);
    }
    out
}

/// Largest principal angle (degrees) between the row spaces of `a` and `b`.
pub fn max_principal_angle_deg(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let qa = orthonormal_rows(a);
    let qb = orthonormal_rows(b);
    if qa.nrows() == 0 || qb.nrows() == 0 {
        return 90.0;
    }
    let cross = qa.dot(&qb.t());
    let sv = singular_values(&cross);
    let k = qa.nrows().min(qb.nrows());
    let cos_min = sv.get(k - 1).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
    cos_min.acos().to_degrees()
}
