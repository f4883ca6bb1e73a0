//! Scalar probabilistic kernels shared by both inference phases.
//!
//! Everything here operates on the spike-and-slab (Bernoulli-Gaussian)
//! model: each signal entry is zero with probability `1 - activity` and
//! drawn from a Gaussian slab otherwise. The kernels compute exact
//! posterior moments under a Gaussian pseudo-observation, plus the
//! per-entry support messages exchanged between frames.
//!
//! All belief combination happens in the log/logit domain: products of
//! probabilities over thousands of frames underflow long before they
//! stop carrying information.

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};

/// Lower clamp for probabilities; outputs live in `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Floor applied to every variance before it is used as a divisor.
pub const VAR_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Global model hyperparameters learned by EM.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Global sparsity rate: prior probability that a row is active.
    pub lambda: f64,
    /// Prior mean of active factor coefficients.
    pub g0_mean: f64,
    /// Prior variance of active factor coefficients.
    pub g0_var: f64,
    /// Per-frame measurement noise variance.
    pub noise_var: Vec<f64>,
    /// Factorization rank.
    pub rank: usize,
}

impl Hyperparams {
    pub fn new(
        lambda: f64,
        g0_mean: f64,
        g0_var: f64,
        noise_var: Vec<f64>,
        rank: usize,
    ) -> Result<Self> {
        if !(lambda.is_finite() && g0_mean.is_finite() && g0_var.is_finite()) {
            return Err(Error::invalid("hyperparameters must be finite"));
        }
        if noise_var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("noise variances must be finite and nonnegative"));
        }
        if rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        Ok(Self {
            lambda,
            g0_mean,
            g0_var,
            noise_var,
            rank,
        }
        .clamped())
    }

    /// Applies the type invariants: probability clamp on `lambda`, variance
    /// floors on `g0_var` and every `noise_var` entry.
    pub fn clamped(mut self) -> Self {
        self.lambda = clamp_prob(self.lambda);
        self.g0_var = self.g0_var.max(VAR_FLOOR);
        for v in &mut self.noise_var {
            *v = v.max(VAR_FLOOR);
        }
        self
    }

    /// Checks shape-dependent invariants against problem dimensions.
    pub fn validate(&self, n: usize, t: usize) -> Result<()> {
        if self.noise_var.len() != t {
            return Err(Error::invalid(format!(
                "noise_var has {} entries, expected {t}",
                self.noise_var.len()
            )));
        }
        if self.rank > n.min(t) {
            return Err(Error::invalid(format!(
                "rank {} exceeds min(N, T) = {}",
                self.rank,
                n.min(t)
            )));
        }
        Ok(())
    }
}

/// Per-entry Bernoulli-Gaussian prior parameters for the signal matrix.
///
/// Column `t` is the prior handed to frame `t`'s linear solver; the fields
/// are refreshed by the factorization phase between outer iterations.
#[derive(Debug, Clone)]
pub struct BgPriorField {
    /// Activity probability per entry.
    pub support_prob: Array2<f64>,
    /// Slab mean per entry.
    pub active_mean: Array2<f64>,
    /// Slab variance per entry.
    pub active_var: Array2<f64>,
}

impl BgPriorField {
    /// Uniform field: every entry gets the same activity, mean, and variance.
    pub fn flat(n: usize, t: usize, activity: f64, mean: f64, var: f64) -> Self {
        Self {
            support_prob: Array2::from_elem((n, t), clamp_prob(activity)),
            active_mean: Array2::from_elem((n, t), mean),
            active_var: Array2::from_elem((n, t), var.max(VAR_FLOOR)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.support_prob.dim()
    }
}

/// Support beliefs exchanged between frames.
#[derive(Debug, Clone)]
pub struct SupportBeliefs {
    /// Leave-one-out prior for each entry (what the frame solver consumes).
    pub outgoing: Array2<f64>,
    /// Local support posterior per entry (what each frame reports).
    pub posterior_local: Array2<f64>,
    /// Per-row posterior combining every frame.
    pub row_posterior: Array1<f64>,
}

/// Posterior moments of a scalar Bernoulli-Gaussian variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgMoments {
    pub mean: f64,
    pub var: f64,
    /// Posterior probability that the entry is active.
    pub support_prob: f64,
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Log-density of a scalar Gaussian.
#[inline]
pub fn ln_gauss(x: f64, mean: f64, var: f64) -> f64 {
    let v = var.max(VAR_FLOOR);
    let d = x - mean;
    -0.5 * (LN_2PI + v.ln() + d * d / v)
}

#[inline]
pub(crate) fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// Conjugate Gaussian update: slab `N(q, vq)` observed through `N(r; x, vr)`.
///
/// Returns the conditional-on-active posterior mean and variance. `vq = 0`
/// collapses to the point `q`.
#[inline]
pub fn bg_conditional_moments(r: f64, vr: f64, q: f64, vq: f64) -> (f64, f64) {
    let vr = vr.max(VAR_FLOOR);
    let denom = vq + vr;
    ((r * vq + q * vr) / denom, vq * vr / denom)
}

/// Exact posterior moments of a scalar Bernoulli-Gaussian variable under a
/// Gaussian pseudo-observation.
///
/// Prior: `(1 - activity)·δ(x) + activity·N(x; q, vq)`; observation
/// `N(r; x, vr)`. Returns the posterior mean, variance, and support
/// probability. The support odds are formed in the log domain so extreme
/// evidence saturates instead of overflowing.
pub fn bg_posterior_moments(
    r: f64,
    vr: f64,
    activity: f64,
    q: f64,
    vq: f64,
) -> Result<BgMoments> {
    if !(r.is_finite() && vr.is_finite() && activity.is_finite() && q.is_finite() && vq.is_finite())
    {
        return Err(Error::invalid("bg_posterior_moments: non-finite input"));
    }
    if !(0.0..=1.0).contains(&activity) {
        return Err(Error::invalid("bg_posterior_moments: activity outside [0, 1]"));
    }
    if vq < 0.0 {
        return Err(Error::invalid("bg_posterior_moments: negative slab variance"));
    }
    Ok(bg_posterior_moments_unchecked(r, vr, activity, q, vq))
}

/// Same as [`bg_posterior_moments`] without argument validation. Inner-loop
/// use only; callers are responsible for finite inputs.
#[inline]
pub(crate) fn bg_posterior_moments_unchecked(
    r: f64,
    vr: f64,
    activity: f64,
    q: f64,
    vq: f64,
) -> BgMoments {
    let vr = vr.max(VAR_FLOOR);
    if activity <= 0.0 {
        return BgMoments {
            mean: 0.0,
            var: 0.0,
            support_prob: 0.0,
        };
    }
    let (cond_mean, cond_var) = bg_conditional_moments(r, vr, q, vq);
    let pi = if activity >= 1.0 {
        1.0
    } else {
        let log_odds =
            (activity / (1.0 - activity)).ln() + ln_gauss(r, q, vq + vr) - ln_gauss(r, 0.0, vr);
        sigmoid(log_odds)
    };
    let mean = pi * cond_mean;
    // Algebraically exact second moment; cancellation can push it a hair
    // below zero, hence the clamp.
    let var = (pi * (cond_var + cond_mean * cond_mean) - mean * mean).max(0.0);
    BgMoments {
        mean,
        var,
        support_prob: pi,
    }
}

/// Local support posterior of one entry given its extrinsic Gaussian message
/// `N(u, vu)` and slab parameters `(q, vq)`.
///
/// This is the likelihood-ratio decision between "entry is zero" and "entry
/// follows the slab", with no prior weight attached; the prior enters later
/// through the cross-frame combination.
pub fn support_posterior(u: f64, vu: f64, q: f64, vq: f64) -> Result<f64> {
    if !(u.is_finite() && vu.is_finite() && q.is_finite() && vq.is_finite()) {
        return Err(Error::invalid("support_posterior: non-finite input"));
    }
    if vq < 0.0 {
        return Err(Error::invalid("support_posterior: negative slab variance"));
    }
    Ok(support_posterior_unchecked(u, vu, q, vq))
}

#[inline]
pub(crate) fn support_posterior_unchecked(u: f64, vu: f64, q: f64, vq: f64) -> f64 {
    let vu = vu.max(VAR_FLOOR);
    clamp_prob(sigmoid(ln_gauss(u, q, vq + vu) - ln_gauss(0.0, u, vu)))
}

/// Elementwise [`support_posterior`] over whole message matrices.
pub fn support_posterior_field(
    u: &Array2<f64>,
    vu: &Array2<f64>,
    q: &Array2<f64>,
    vq: &Array2<f64>,
) -> Result<Array2<f64>> {
    if u.dim() != vu.dim() || u.dim() != q.dim() || u.dim() != vq.dim() {
        return Err(Error::invalid("support_posterior_field: shape mismatch"));
    }
    let mut out = Array2::zeros(u.dim());
    let mut bad = false;
    Zip::from(&mut out)
        .and(u)
        .and(vu)
        .and(q)
        .and(vq)
        .for_each(|o, &u, &vu, &q, &vq| {
            if !(u.is_finite() && vu.is_finite() && q.is_finite() && vq.is_finite()) || vq < 0.0 {
                bad = true;
            } else {
                *o = support_posterior_unchecked(u, vu, q, vq);
            }
        });
    if bad {
        return Err(Error::invalid("support_posterior_field: invalid entry"));
    }
    Ok(out)
}

/// Leave-one-out log and logit bookkeeping for one belief matrix.
///
/// Stores, per entry, `ln p` and `ln(1 - p)` after clamping, plus row totals.
/// The leave-one-out sum for entry `(n, t)` is the row total minus the entry's
/// own term; rows containing a term at the clamp boundary are recomputed by
/// direct summation because the subtraction shortcut is ill-conditioned there.
struct RowLogSums {
    ln_p: Array2<f64>,
    ln_not_p: Array2<f64>,
    total_p: Array1<f64>,
    total_not_p: Array1<f64>,
    boundary_row: Vec<bool>,
}

impl RowLogSums {
    fn new(beliefs: &Array2<f64>) -> Result<Self> {
        if beliefs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("support beliefs must be probabilities"));
        }
        let ln_boundary = PROB_CLAMP.ln() + 1e-9;
        let ln_p = beliefs.mapv(|p| clamp_prob(p).ln());
        let ln_not_p = beliefs.mapv(|p| (1.0 - clamp_prob(p)).ln());
        let (n, _) = beliefs.dim();
        let mut total_p = Array1::zeros(n);
        let mut total_not_p = Array1::zeros(n);
        let mut boundary_row = vec![false; n];
        for (i, (row_p, row_np)) in ln_p.rows().into_iter().zip(ln_not_p.rows()).enumerate() {
            total_p[i] = row_p.sum();
            total_not_p[i] = row_np.sum();
            boundary_row[i] = row_p
                .iter()
                .chain(row_np.iter())
                .any(|&v| v <= ln_boundary);
        }
        Ok(Self {
            ln_p,
            ln_not_p,
            total_p,
            total_not_p,
            boundary_row,
        })
    }

    /// Leave-one-out sums `(Σ_{t'≠t} ln p, Σ_{t'≠t} ln(1-p))` for entry (n, t).
    fn loo(&self, n: usize, t: usize) -> (f64, f64) {
        if self.boundary_row[n] {
            let mut sp = 0.0;
            let mut snp = 0.0;
            for tt in 0..self.ln_p.ncols() {
                if tt != t {
                    sp += self.ln_p[(n, tt)];
                    snp += self.ln_not_p[(n, tt)];
                }
            }
            (sp, snp)
        } else {
            (
                self.total_p[n] - self.ln_p[(n, t)],
                self.total_not_p[n] - self.ln_not_p[(n, t)],
            )
        }
    }
}

/// Unclamped logit of the leave-one-out combination for every entry.
///
/// Entry `(n, t)` is `logit(rate) + Σ_{t'≠t} [ln p_{nt'} - ln(1 - p_{nt'})]`;
/// the probability-domain operation [`support_outgoing`] is its sigmoid,
/// clamped. Exposed so callers that chain combinations can stay in the logit
/// domain and avoid the representation loss of saturated probabilities.
pub fn support_outgoing_logits(rate: f64, posterior_local: &Array2<f64>) -> Result<Array2<f64>> {
    if !rate.is_finite() || !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("support_outgoing: rate must be a probability"));
    }
    let sums = RowLogSums::new(posterior_local)?;
    let base = logit(rate);
    let (n, t) = posterior_local.dim();
    let mut out = Array2::zeros((n, t));
    for i in 0..n {
        for j in 0..t {
            let (sp, snp) = sums.loo(i, j);
            out[(i, j)] = base + sp - snp;
        }
    }
    Ok(out)
}

/// Cross-frame support combination: for each entry, the global rate combined
/// with every *other* frame's local belief about the same row.
pub fn support_outgoing(rate: f64, posterior_local: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(support_outgoing_logits(rate, posterior_local)?.mapv(|l| clamp_prob(sigmoid(l))))
}

/// Unclamped logit of the full-row support posterior (all frames included).
pub fn row_support_logits(rate: f64, posterior_local: &Array2<f64>) -> Result<Array1<f64>> {
    if !rate.is_finite() || !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("row_support_posterior: rate must be a probability"));
    }
    let sums = RowLogSums::new(posterior_local)?;
    let base = logit(rate);
    Ok(Array1::from_iter(
        sums.total_p
            .iter()
            .zip(sums.total_not_p.iter())
            .map(|(&sp, &snp)| base + sp - snp),
    ))
}

/// Posterior probability that each row is active, combining the global rate
/// with the local beliefs of all frames.
pub fn row_support_posterior(rate: f64, posterior_local: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(row_support_logits(rate, posterior_local)?.mapv(|l| clamp_prob(sigmoid(l))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn bg_moments_zero_activity_forces_zero_atom() {
        let m = bg_posterior_moments(5.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!((m.mean, m.var, m.support_prob), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bg_moments_full_activity_is_conjugate_update() {
        let m = bg_posterior_moments(2.0, 1.0, 1.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(m.mean, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.var, 0.5, epsilon = 1e-14);
        assert_eq!(m.support_prob, 1.0);
    }

    #[test]
    fn bg_moments_matches_frozen_quadrature_value() {
        // Independent quadrature of the scalar posterior (1e6-point trapezoid
        // on +-10 sd) gives these values for (r=1, vr=0.25, lam=0.5, q=0, vq=1).
        let m = bg_posterior_moments(1.0, 0.25, 0.5, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(m.mean, 0.551_171_317_411_518_5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.var, 0.274_940_062_144_945_5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.support_prob, 0.688_964_146_764_398_1, epsilon = 1e-12);
    }

    #[test]
    fn bg_moments_rejects_non_finite() {
        assert!(bg_posterior_moments(f64::NAN, 1.0, 0.5, 0.0, 1.0).is_err());
        assert!(bg_posterior_moments(1.0, f64::INFINITY, 0.5, 0.0, 1.0).is_err());
        assert!(bg_posterior_moments(1.0, 1.0, 0.5, 0.0, -1.0).is_err());
    }

    #[test]
    fn support_posterior_is_half_for_degenerate_slab() {
        for &u in &[-3.0, 0.0, 0.7, 42.0] {
            for &v in &[1e-12, 0.1, 5.0] {
                let p = support_posterior(u, v, 0.0, 0.0).unwrap();
                assert_abs_diff_eq!(p, 0.5, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn support_posterior_certifies_exact_match() {
        let p = support_posterior(1.0, 1e-12, 1.0, 1.0).unwrap();
        assert!(p >= 1.0 - PROB_CLAMP - 1e-15);
    }

    #[test]
    fn support_posterior_matches_frozen_value() {
        let p = support_posterior(1.0, 0.25, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, 0.767_684_243_886_749_5, epsilon = 1e-12);
    }

    #[test]
    fn support_outgoing_uniform_beliefs_return_rate() {
        let local = Array2::from_elem((4, 5), 0.5);
        let out = support_outgoing(0.3, &local).unwrap();
        for &v in out.iter() {
            assert_abs_diff_eq!(v, 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn support_outgoing_matches_frozen_value() {
        // rate 0.5, other-frame beliefs {0.8, 0.9}: 0.36 / (0.36 + 0.01).
        let local = array![[0.8, 0.9, 0.5]];
        let out = support_outgoing(0.5, &local).unwrap();
        assert_abs_diff_eq!(out[(0, 2)], 0.972_972_972_972_973, epsilon = 1e-12);
    }

    #[test]
    fn support_outgoing_propagates_near_certainty() {
        let local = array![[1.0 - PROB_CLAMP, 0.5, 0.5]];
        let out = support_outgoing(0.5, &local).unwrap();
        assert!(out[(0, 1)] >= 1.0 - 10.0 * PROB_CLAMP);
        assert!(out[(0, 2)] >= 1.0 - 10.0 * PROB_CLAMP);
    }

    #[test]
    fn row_posterior_uniform_is_rate() {
        let local = Array2::from_elem((3, 4), 0.5);
        let row = row_support_posterior(0.5, &local).unwrap();
        for &v in row.iter() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn row_posterior_matches_frozen_value() {
        let local = array![[0.9, 0.9]];
        let row = row_support_posterior(0.5, &local).unwrap();
        assert_abs_diff_eq!(row[0], 0.81 / 0.82, epsilon = 1e-12);
    }

    #[test]
    fn row_posterior_vanishing_rate() {
        let local = Array2::from_elem((2, 6), 0.5);
        let row = row_support_posterior(PROB_CLAMP, &local).unwrap();
        for &v in row.iter() {
            assert!(v <= 2.0 * PROB_CLAMP);
        }
    }

    #[test]
    fn leave_one_out_recombination_matches_row_posterior() {
        // Inserting the excluded frame's belief back via the Bayes product
        // rule must reproduce the full-row posterior.
        let local = array![
            [0.2, 0.7, 0.9, 0.4],
            [0.5, 0.5, 0.5, 0.5],
            [0.01, 0.99, 0.6, 0.3]
        ];
        let rate = 0.35;
        let out = support_outgoing(rate, &local).unwrap();
        let row = row_support_posterior(rate, &local).unwrap();
        for n in 0..local.nrows() {
            for t in 0..local.ncols() {
                let combined = sigmoid(logit(out[(n, t)]) + logit(local[(n, t)]));
                assert_abs_diff_eq!(combined, row[n], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn boundary_rows_use_honest_recomputation() {
        // A row holding a clamped belief exercises the guard path; logit
        // consistency must still hold exactly.
        let local = array![[PROB_CLAMP, 0.8, 1.0 - PROB_CLAMP, 0.5]];
        let rate = 0.5;
        let logits = support_outgoing_logits(rate, &local).unwrap();
        let row_logit = row_support_logits(rate, &local).unwrap();
        for t in 0..local.ncols() {
            let own = clamp_prob(local[(0, t)]);
            let combined = logits[(0, t)] + own.ln() - (1.0 - own).ln();
            assert_abs_diff_eq!(combined, row_logit[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn hyperparams_clamping() {
        let h = Hyperparams::new(1.5, 0.0, 0.0, vec![0.0, 1.0], 1).unwrap();
        assert_eq!(h.lambda, 1.0 - PROB_CLAMP);
        assert_eq!(h.g0_var, VAR_FLOOR);
        assert_eq!(h.noise_var[0], VAR_FLOOR);
        assert!(Hyperparams::new(0.5, 0.0, 1.0, vec![1.0], 0).is_err());
        let h = Hyperparams::new(0.5, 0.0, 1.0, vec![1.0; 4], 3).unwrap();
        assert!(h.validate(8, 4).is_ok());
        assert!(h.validate(8, 3).is_err()); // noise_var length mismatch
        let h = Hyperparams::new(0.5, 0.0, 1.0, vec![1.0; 4], 5).unwrap();
        assert!(h.validate(8, 4).is_err()); // rank exceeds min(N, T)
    }
}
