//! Everything upstream of inference: sparsifying basis, measurement
//! ensembles, noisy acquisition, synthetic ground-truth generation, and
//! ingestion of user-supplied hyperspectral cubes.
//!
//! All randomness flows through explicit seeds; per-frame seeds are derived
//! from a master seed so frames are independent yet reproducible.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::Hyperparams;

/// Ground-truth signal with its structured factorization.
///
/// `x = diag(support) · h · l` holds exactly; `f` is the dense-domain view
/// `basis · x`. `sparsity` counts the active rows.
#[derive(Debug, Clone)]
pub struct SignalEnsemble {
    pub x: Array2<f64>,
    pub support: Vec<bool>,
    pub h: Array2<f64>,
    pub l: Array2<f64>,
    pub f: Array2<f64>,
    pub sparsity: usize,
}

/// Measurement-matrix ensemble family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    /// i.i.d. Gaussian entries with variance 1/M, fresh matrix per frame.
    Gaussian,
    /// Equiprobable ±1/√M entries, fresh matrix per frame.
    Rademacher,
    /// One Gaussian matrix shared by every frame.
    CommonGaussian,
}

impl EnsembleKind {
    pub fn code(self) -> u32 {
        match self {
            EnsembleKind::Gaussian => 0,
            EnsembleKind::Rademacher => 1,
            EnsembleKind::CommonGaussian => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(EnsembleKind::Gaussian),
            1 => Ok(EnsembleKind::Rademacher),
            2 => Ok(EnsembleKind::CommonGaussian),
            other => Err(Error::invalid(format!("unknown ensemble code {other}"))),
        }
    }
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(EnsembleKind::Gaussian),
            "rademacher" => Ok(EnsembleKind::Rademacher),
            "common" | "common-gaussian" => Ok(EnsembleKind::CommonGaussian),
            other => Err(Error::invalid(format!("unknown ensemble kind '{other}'"))),
        }
    }
}

/// Per-frame compressed measurements.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub matrices: Vec<Array2<f64>>,
    pub observations: Vec<Array1<f64>>,
    pub noise_var: Vec<f64>,
    pub kind: EnsembleKind,
}

impl MeasurementSet {
    pub fn frames(&self) -> usize {
        self.matrices.len()
    }

    /// Signal dimension (columns of every measurement matrix).
    pub fn signal_dim(&self) -> usize {
        self.matrices.first().map_or(0, |a| a.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.matrices.len();
        if t == 0 {
            return Err(Error::invalid("measurement set holds no frames"));
        }
        if self.observations.len() != t || self.noise_var.len() != t {
            return Err(Error::invalid("measurement set field lengths disagree"));
        }
        let n = self.signal_dim();
        for (i, (a, y)) in self.matrices.iter().zip(&self.observations).enumerate() {
            if a.nrows() == 0 {
                return Err(Error::invalid(format!("frame {i}: empty measurement matrix")));
            }
            if a.ncols() != n {
                return Err(Error::invalid(format!("frame {i}: signal dimension mismatch")));
            }
            if a.nrows() != y.len() {
                return Err(Error::invalid(format!("frame {i}: observation length mismatch")));
            }
            if a.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {i}: non-finite entries")));
            }
        }
        if self.noise_var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("noise variances must be finite and nonnegative"));
        }
        if self.kind == EnsembleKind::CommonGaussian {
            for (i, a) in self.matrices.iter().enumerate().skip(1) {
                if a != &self.matrices[0] {
                    return Err(Error::invalid(format!(
                        "common ensemble but frame {i} differs from frame 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Spatial/spectral layout of an ingested cube.
///
/// Pixels are enumerated column-major: pixel `t = row + col · rows`, so a
/// cube column of the signal matrix is one pixel's spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeLayout {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
}

impl CubeLayout {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Deterministic seed derivation: one master seed fans out to independent
/// streams keyed by a purpose tag and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1));
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Orthonormal type-II DCT synthesis matrix. Columns are the cosine atoms;
/// analysis coefficients of a dense vector `f` are `Ψᵀ f`.
pub fn dct_basis(n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::invalid("dct_basis: dimension must be positive"));
    }
    let mut psi = Array2::zeros((n, n));
    let nf = n as f64;
    for k in 0..n {
        let norm = if k == 0 {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        for j in 0..n {
            // Row j, column k: synthesis = transpose of the analysis matrix.
            psi[(j, k)] =
                norm * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * nf)).cos();
        }
    }
    Ok(psi)
}

/// Random measurement matrix of the requested family, deterministic in the
/// seed. Gaussian entries have variance 1/M, Rademacher entries are ±1/√M,
/// so columns have unit expected squared norm either way.
pub fn gen_measurement_matrix(
    kind: EnsembleKind,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("gen_measurement_matrix: dimensions must be positive"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let mut a = Array2::zeros((m, n));
    match kind {
        EnsembleKind::Gaussian | EnsembleKind::CommonGaussian => {
            for v in a.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = g * scale;
            }
        }
        EnsembleKind::Rademacher => {
            for v in a.iter_mut() {
                *v = if rng.random::<bool>() { scale } else { -scale };
            }
        }
    }
    Ok(a)
}

/// One noisy linear acquisition: `y = A x + w` with i.i.d. Gaussian noise of
/// the given variance. `noise_var = 0` returns `A x` exactly.
pub fn acquire_frame(
    a: &Array2<f64>,
    x: &Array1<f64>,
    noise_var: f64,
    seed: u64,
) -> Result<Array1<f64>> {
    if a.ncols() != x.len() {
        return Err(Error::invalid(format!(
            "acquire_frame: matrix has {} columns but signal has {} entries",
            a.ncols(),
            x.len()
        )));
    }
    if !noise_var.is_finite() || noise_var < 0.0 {
        return Err(Error::invalid("acquire_frame: noise variance must be finite and nonnegative"));
    }
    let mut y = a.dot(x);
    if noise_var > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sd = noise_var.sqrt();
        for v in y.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += sd * g;
        }
    }
    Ok(y)
}

/// Noise variance that hits a target SNR for the given noiseless
/// measurements: `τ = (‖z‖²/M) · 10^(−snr/10)`.
pub fn snr_to_noise_var(z: &Array1<f64>, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() {
        return Err(Error::invalid("snr_to_noise_var: NaN target"));
    }
    let power = z.dot(z) / z.len().max(1) as f64;
    if power == 0.0 && snr_db.is_finite() {
        return Err(Error::DegenerateSignal(
            "snr_to_noise_var: all-zero measurements".into(),
        ));
    }
    Ok(power * 10f64.powf(-snr_db / 10.0))
}

/// Synthetic low-rank and joint-sparse ground truth.
///
/// Picks `k` active rows uniformly, draws the row factor from the active
/// coefficient prior and the frame factor from the standard normal, and
/// assembles the signal plus its dense-domain view under the DCT basis.
pub fn gen_ls_signal(
    n: usize,
    t: usize,
    r: usize,
    k: usize,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<SignalEnsemble> {
    if n == 0 || t == 0 {
        return Err(Error::invalid("gen_ls_signal: empty dimensions"));
    }
    if k > n {
        return Err(Error::invalid(format!("gen_ls_signal: sparsity {k} exceeds dimension {n}")));
    }
    if r == 0 || r > k.min(t) {
        return Err(Error::invalid(format!(
            "gen_ls_signal: rank {r} outside [1, min(K, T)] = [1, {}]",
            k.min(t)
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Partial Fisher-Yates draw of k distinct active rows.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..(n - i));
        idx.swap(i, j);
    }
    let mut support = vec![false; n];
    for &i in &idx[..k] {
        support[i] = true;
    }

    let g_sd = hyper.g0_var.sqrt();
    let mut h = Array2::zeros((n, r));
    for v in h.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = hyper.g0_mean + g_sd * g;
    }
    let mut l = Array2::zeros((r, t));
    for v in l.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    let mut x = h.dot(&l);
    for (i, active) in support.iter().enumerate() {
        if !active {
            x.row_mut(i).fill(0.0);
        }
    }
    let f = dct_basis(n)?.dot(&x);
    Ok(SignalEnsemble {
        x,
        support,
        h,
        l,
        f,
        sparsity: k,
    })
}

/// Acquires every column of a signal matrix with `m` measurements per frame
/// at the target SNR. Matrices and noise draws use independent derived
/// seeds; the common ensemble reuses frame 0's matrix everywhere.
pub fn acquire_signal(
    x: &Array2<f64>,
    m: usize,
    kind: EnsembleKind,
    snr_db: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    let (n, t) = x.dim();
    if m == 0 || n == 0 || t == 0 {
        return Err(Error::invalid("acquire_signal: empty problem"));
    }
    let common = if kind == EnsembleKind::CommonGaussian {
        Some(gen_measurement_matrix(kind, m, n, derive_seed(seed, "matrix", 0))?)
    } else {
        None
    };
    let mut matrices = Vec::with_capacity(t);
    let mut observations = Vec::with_capacity(t);
    let mut noise_var = Vec::with_capacity(t);
    for frame in 0..t {
        let a = match &common {
            Some(a) => a.clone(),
            None => gen_measurement_matrix(kind, m, n, derive_seed(seed, "matrix", frame as u64))?,
        };
        let xt = x.column(frame).to_owned();
        let z = a.dot(&xt);
        // A zero column carries no signal; record a zero-noise frame rather
        // than failing the whole acquisition.
        let tau = if z.dot(&z) == 0.0 {
            0.0
        } else {
            snr_to_noise_var(&z, snr_db)?
        };
        let y = acquire_frame(&a, &xt, tau, derive_seed(seed, "noise", frame as u64))?;
        matrices.push(a);
        observations.push(y);
        noise_var.push(tau);
    }
    Ok(MeasurementSet {
        matrices,
        observations,
        noise_var,
        kind,
    })
}

/// Flattens a `rows × cols × bands` cube into the band-by-pixel matrices the
/// solvers consume: `f` column `t` is pixel `t`'s spectrum, `x = Ψᵀ f`.
pub fn cube_to_signal(
    cube: &Array3<f64>,
    basis: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, CubeLayout)> {
    let (rows, cols, bands) = cube.dim();
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(Error::invalid("cube_to_signal: empty cube"));
    }
    if basis.nrows() != bands || basis.ncols() != bands {
        return Err(Error::invalid(format!(
            "cube_to_signal: basis is {}×{} but cube has {} bands",
            basis.nrows(),
            basis.ncols(),
            bands
        )));
    }
    if cube.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cube_to_signal: non-finite voxel"));
    }
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::invalid("cube_to_signal: pixel count overflow"))?;
    let mut f = Array2::zeros((bands, pixels));
    for col in 0..cols {
        for row in 0..rows {
            let t = row + col * rows;
            for band in 0..bands {
                f[(band, t)] = cube[(row, col, band)];
            }
        }
    }
    let x = basis.t().dot(&f);
    Ok((
        x,
        f,
        CubeLayout {
            rows,
            cols,
            bands,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_abs_diff_eq;

    fn test_hyper(t: usize) -> Hyperparams {
        Hyperparams::new(0.5, 0.0, 1.0, vec![1.0; t], 2).unwrap()
    }

    #[test]
    fn dct_is_orthonormal() {
        for &n in &[1usize, 4, 8, 33] {
            let psi = dct_basis(n).unwrap();
            assert!(linalg::orthonormality_error(&psi) < 1e-12, "n = {n}");
        }
        assert!(dct_basis(0).is_err());
        let psi = dct_basis(1).unwrap();
        assert_abs_diff_eq!(psi[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dct_concentrates_constant_signal() {
        let psi = dct_basis(4).unwrap();
        let ones = Array1::from_elem(4, 1.0);
        let coeffs = psi.t().dot(&ones);
        assert_abs_diff_eq!(coeffs[0], 2.0, epsilon = 1e-12);
        for k in 1..4 {
            assert_abs_diff_eq!(coeffs[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dct_preserves_norms() {
        let psi = dct_basis(8).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x: Array1<f64> = Array1::from_iter((0..8).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let fx = psi.dot(&x);
        assert_abs_diff_eq!(fx.dot(&fx).sqrt(), x.dot(&x).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rademacher_entries_are_half_magnitude() {
        let a = gen_measurement_matrix(EnsembleKind::Rademacher, 4, 4, 11).unwrap();
        for &v in a.iter() {
            assert!(v == 0.5 || v == -0.5);
        }
    }

    #[test]
    fn gaussian_columns_concentrate_on_unit_norm() {
        let a = gen_measurement_matrix(EnsembleKind::Gaussian, 1000, 8, 3).unwrap();
        for col in a.columns() {
            let sq = col.dot(&col);
            assert!((0.8..1.2).contains(&sq), "column norm² = {sq}");
        }
    }

    #[test]
    fn matrix_generation_is_deterministic() {
        let a = gen_measurement_matrix(EnsembleKind::Gaussian, 16, 9, 42).unwrap();
        let b = gen_measurement_matrix(EnsembleKind::Gaussian, 16, 9, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_acquisition_is_exact_and_linear() {
        let a = gen_measurement_matrix(EnsembleKind::Gaussian, 6, 10, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x1: Array1<f64> =
            Array1::from_iter((0..10).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x2: Array1<f64> =
            Array1::from_iter((0..10).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y1 = acquire_frame(&a, &x1, 0.0, 0).unwrap();
        assert_eq!(y1, a.dot(&x1));
        let zero = Array1::zeros(10);
        assert_eq!(acquire_frame(&a, &zero, 0.0, 0).unwrap(), Array1::zeros(6));
        let combo = acquire_frame(&a, &(&x1 * 2.0 + &x2 * -0.5), 0.0, 0).unwrap();
        let y2 = acquire_frame(&a, &x2, 0.0, 0).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(combo[i], 2.0 * y1[i] - 0.5 * y2[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn acquisition_noise_has_requested_variance() {
        let m = 100_000;
        let a = Array2::zeros((m, 1));
        let x = Array1::zeros(1);
        let y = acquire_frame(&a, &x, 0.04, 123).unwrap();
        let var = y.dot(&y) / m as f64;
        assert!((var - 0.04).abs() / 0.04 < 0.02, "empirical variance {var}");
    }

    #[test]
    fn snr_conversion_matches_formula() {
        let z = Array1::from_elem(4, 1.0);
        assert_abs_diff_eq!(snr_to_noise_var(&z, 0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(snr_to_noise_var(&z, 10.0).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(
            snr_to_noise_var(&z, 25.0).unwrap(),
            10f64.powf(-2.5),
            epsilon = 1e-15
        );
        assert!(snr_to_noise_var(&Array1::zeros(4), 10.0).is_err());
    }

    #[test]
    fn target_snr_is_achieved_empirically() {
        let m = 20_000;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let z: Array1<f64> = Array1::from_iter((0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // A is z as a single column, so Ax = z for x = [1].
        let a = Array2::from_shape_fn((m, 1), |(i, _)| z[i]);
        let x = Array1::from_elem(1, 1.0);
        let tau = snr_to_noise_var(&z, 25.0).unwrap();
        let y = acquire_frame(&a, &x, tau, 5).unwrap();
        let noise = &y - &z;
        let snr = 10.0 * (z.dot(&z) / noise.dot(&noise)).log10();
        assert!((snr - 25.0).abs() < 0.2, "empirical SNR {snr}");
    }

    #[test]
    fn ls_signal_has_exact_factorization_and_rank() {
        let hyper = test_hyper(8);
        let e = gen_ls_signal(16, 8, 2, 4, &hyper, 31).unwrap();
        let mut nonzero_rows = 0;
        for (i, row) in e.x.rows().into_iter().enumerate() {
            let energy = row.dot(&row);
            if energy > 0.0 {
                nonzero_rows += 1;
                assert!(e.support[i]);
            }
            // X = diag(s) H L exactly.
            let expect = if e.support[i] {
                e.h.row(i).dot(&e.l)
            } else {
                Array1::zeros(8)
            };
            for t in 0..8 {
                assert_abs_diff_eq!(row[t], expect[t], epsilon = 1e-12);
            }
        }
        assert_eq!(nonzero_rows, 4);
        let sv = linalg::singular_values(&e.x);
        assert!(sv[2] <= 1e-10 * sv[0], "rank exceeds 2: {sv:?}");
    }

    #[test]
    fn ls_signal_rejects_bad_shapes() {
        let hyper = test_hyper(8);
        assert!(gen_ls_signal(16, 8, 1, 0, &hyper, 0).is_err()); // K = 0
        assert!(gen_ls_signal(16, 8, 5, 4, &hyper, 0).is_err()); // R > K
        assert!(gen_ls_signal(16, 8, 2, 20, &hyper, 0).is_err()); // K > N
    }

    #[test]
    fn ls_signal_is_deterministic() {
        let hyper = test_hyper(6);
        let a = gen_ls_signal(12, 6, 2, 5, &hyper, 99).unwrap();
        let b = gen_ls_signal(12, 6, 2, 5, &hyper, 99).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.f, b.f);
        assert_eq!(a.support, b.support);
    }

    #[test]
    fn cube_flattening_shapes_and_roundtrip() {
        let mut cube = Array3::zeros((8, 8, 16));
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for v in cube.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let basis = dct_basis(16).unwrap();
        let (x, f, layout) = cube_to_signal(&cube, &basis).unwrap();
        assert_eq!(x.dim(), (16, 64));
        assert_eq!(layout, CubeLayout { rows: 8, cols: 8, bands: 16 });
        let f_back = basis.dot(&x);
        let err = linalg::fro_norm(&(&f_back - &f)) / linalg::fro_norm(&f);
        assert!(err <= 1e-10);
        // Pixel ordering: t = row + col * rows.
        assert_abs_diff_eq!(f[(3, 2 + 5 * 8)], cube[(2, 5, 3)], epsilon = 0.0);
    }

    #[test]
    fn constant_cube_concentrates_on_dc_row() {
        let cube = Array3::from_elem((3, 2, 8), 2.5);
        let basis = dct_basis(8).unwrap();
        let (x, _, _) = cube_to_signal(&cube, &basis).unwrap();
        for band in 1..8 {
            for t in 0..6 {
                assert_abs_diff_eq!(x[(band, t)], 0.0, epsilon = 1e-12);
            }
        }
        for t in 0..6 {
            assert!(x[(0, t)].abs() > 1.0);
        }
    }

    #[test]
    fn acquire_signal_common_ensemble_shares_matrix() {
        let hyper = test_hyper(5);
        let e = gen_ls_signal(12, 5, 2, 4, &hyper, 1).unwrap();
        let meas = acquire_signal(&e.x, 6, EnsembleKind::CommonGaussian, 25.0, 7).unwrap();
        meas.validate().unwrap();
        for a in &meas.matrices {
            assert_eq!(a, &meas.matrices[0]);
        }
        let fresh = acquire_signal(&e.x, 6, EnsembleKind::Gaussian, 25.0, 7).unwrap();
        assert_ne!(fresh.matrices[0], fresh.matrices[1]);
    }
}
