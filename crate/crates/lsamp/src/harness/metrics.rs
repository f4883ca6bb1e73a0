//! Reconstruction quality metrics.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Metrics for one reconstruction run.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub cnmse: f64,
    /// `10·log₁₀ cnmse`.
    pub cnmse_db: f64,
    pub support_precision: Option<f64>,
    pub support_recall: Option<f64>,
    pub support_f1: Option<f64>,
    pub runtime_s: f64,
    pub rank_selected: Option<usize>,
    /// Reference columns with zero norm, excluded from the average.
    pub zero_columns: usize,
}

/// Column-averaged normalized squared error.
///
/// Each column contributes `‖x_t − x̂_t‖² / ‖x_t‖²`; columns whose reference
/// norm is zero are excluded from the average and counted separately.
pub fn cnmse_detailed(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<(f64, usize)> {
    if x.dim() != x_hat.dim() {
        return Err(Error::invalid("cnmse: shape mismatch"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (col, col_hat) in x.columns().into_iter().zip(x_hat.columns()) {
        let energy = col.dot(&col);
        if energy == 0.0 {
            skipped += 1;
            continue;
        }
        let diff = &col_hat - &col;
        total += diff.dot(&diff) / energy;
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateSignal(
            "cnmse: every reference column is zero".into(),
        ));
    }
    Ok((total / used as f64, skipped))
}

/// See [`cnmse_detailed`]; discards the zero-column count.
pub fn cnmse(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    cnmse_detailed(x, x_hat).map(|(v, _)| v)
}

/// Decibel view of a CNMSE value.
pub fn cnmse_db(value: f64) -> f64 {
    10.0 * value.max(1e-300).log10()
}

/// Precision, recall, and F1 of thresholded row-support probabilities
/// against the true support.
pub fn support_metrics(
    truth: &[bool],
    estimated: &Array1<f64>,
    threshold: f64,
) -> Result<(f64, f64, f64)> {
    if truth.len() != estimated.len() {
        return Err(Error::invalid("support_metrics: length mismatch"));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&active, &p) in truth.iter().zip(estimated.iter()) {
        let detected = p >= threshold;
        match (active, detected) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 1.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cnmse_basics() {
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(cnmse(&x, &x).unwrap(), 0.0);
        let zero = Array2::zeros((2, 2));
        assert_abs_diff_eq!(cnmse(&x, &zero).unwrap(), 1.0, epsilon = 1e-15);
        // Frozen hand computation: (1 + 0.25) / 2.
        let x_hat = array![[0.0, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(cnmse(&x, &x_hat).unwrap(), 0.625, epsilon = 1e-15);
    }

    #[test]
    fn cnmse_excludes_zero_columns() {
        let x = array![[1.0, 0.0], [0.0, 0.0]];
        let x_hat = array![[1.0, 3.0], [0.0, 0.0]];
        let (v, skipped) = cnmse_detailed(&x, &x_hat).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(skipped, 1);
        let zeros = Array2::zeros((2, 2));
        assert!(matches!(
            cnmse(&zeros, &zeros),
            Err(Error::DegenerateSignal(_))
        ));
    }

    #[test]
    fn cnmse_invariances() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let x_hat = array![[1.1, 1.9], [2.8, 4.3]];
        let base = cnmse(&x, &x_hat).unwrap();
        // Simultaneous column permutation.
        let xp = array![[2.0, 1.0], [4.0, 3.0]];
        let xhp = array![[1.9, 1.1], [4.3, 2.8]];
        assert_abs_diff_eq!(cnmse(&xp, &xhp).unwrap(), base, epsilon = 1e-15);
        // Global scaling.
        let c = -3.7;
        assert_abs_diff_eq!(
            cnmse(&(&x * c), &(&x_hat * c)).unwrap(),
            base,
            epsilon = 1e-12
        );
    }

    #[test]
    fn support_metric_counts() {
        let truth = vec![true, true, false, false];
        let est = array![0.9, 0.2, 0.8, 0.1];
        let (p, r, f1) = support_metrics(&truth, &est, 0.5).unwrap();
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f1, 0.5, epsilon = 1e-15);
    }
}
