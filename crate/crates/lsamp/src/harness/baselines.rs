//! Ablation baselines sharing the outer-loop driver.

use ndarray::Array2;

use crate::error::Result;
use crate::sensing::MeasurementSet;
use crate::turbo::{run_reconstruction, Mode, Reconstruction, TurboConfig};

/// Per-frame recovery with per-frame EM and no coupling between frames:
/// what the full algorithm is worth is measured against this.
pub fn baseline_independent(
    meas: &MeasurementSet,
    basis: &Array2<f64>,
    config: &TurboConfig,
) -> Result<Reconstruction> {
    run_reconstruction(meas, basis, config, Mode::Independent)
}

/// Cross-frame support messages active, factorization phase disabled: the
/// slab parameters stay at their global EM values, isolating the value of
/// structured sparsity without amplitude correlation.
pub fn baseline_jointsparse(
    meas: &MeasurementSet,
    basis: &Array2<f64>,
    config: &TurboConfig,
) -> Result<Reconstruction> {
    run_reconstruction(meas, basis, config, Mode::JointSparse)
}
