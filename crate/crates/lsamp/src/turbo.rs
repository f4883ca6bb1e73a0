//! The outer reconstruction loop.
//!
//! Each outer iteration runs the per-frame linear phase on every frame,
//! converts the extrinsic messages into local support beliefs, refreshes
//! the cross-frame support combination, factors the pseudo-observed signal
//! matrix, and re-estimates the hyperparameters by EM. The loop stops when
//! the posterior signal estimate stalls or the iteration cap is reached.
//!
//! Two ablations share this driver: one with no cross-frame coupling at
//! all (independent per-frame recovery with per-frame EM) and one that
//! exchanges support messages but never runs the factorization phase.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bigamp::{
    bigamp_solve, select_rank, BigAmpOptions, FactorEstimate, PseudoObservation,
    RankSelectOptions,
};
use crate::error::{Error, Result};
use crate::gamp::{gamp_solve_frame, FrameProblem, FrameResult, GampOptions, PriorColumn};
use crate::linalg;
use crate::priors::{
    bg_posterior_moments_unchecked, clamp_prob, row_support_posterior, support_outgoing,
    support_posterior_field, BgPriorField, Hyperparams, SupportBeliefs, VAR_FLOOR,
};
use crate::sensing::{derive_seed, MeasurementSet};

/// How the factorization rank is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    /// Use this rank everywhere.
    Fixed(usize),
    /// Penalized-likelihood selection up to this cap at the first outer
    /// iteration.
    Auto(usize),
}

impl Default for RankMode {
    fn default() -> Self {
        RankMode::Auto(8)
    }
}

/// Configuration of the outer loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurboConfig {
    pub max_outer_iters: usize,
    /// Stop once the relative change of the signal estimate falls below this.
    pub outer_tol: f64,
    pub init_lambda: f64,
    pub init_g0_mean: f64,
    pub init_g0_var: f64,
    pub init_noise_var: f64,
    pub rank_mode: RankMode,
    /// Pool the EM noise estimate across frames instead of per frame.
    pub shared_noise_var: bool,
    /// Re-run rank selection every outer iteration instead of once.
    pub reselect_rank: bool,
    /// Uncoupled outer iterations before the phases start exchanging
    /// messages; lets EM anneal the noise level away from its deliberately
    /// pessimistic initial value before rank selection and factorization
    /// see the data.
    pub warmup_iters: usize,
    pub gamp: GampOptions,
    /// Factorization options; its `init_seed` is overridden by a stream
    /// derived from `master_seed`.
    pub bigamp: BigAmpOptions,
    pub master_seed: u64,
}

impl Default for TurboConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 20,
            outer_tol: 1e-5,
            init_lambda: 0.5,
            init_g0_mean: 0.0,
            init_g0_var: 1.0,
            init_noise_var: 100.0,
            rank_mode: RankMode::default(),
            shared_noise_var: false,
            reselect_rank: false,
            warmup_iters: 6,
            gamp: GampOptions::default(),
            bigamp: BigAmpOptions::default(),
            master_seed: 0,
        }
    }
}

impl TurboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::invalid("max_outer_iters must be at least 1"));
        }
        if !(self.outer_tol > 0.0) || !(self.gamp.tol > 0.0) || !(self.bigamp.tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(0.0..=1.0).contains(&self.init_lambda) {
            return Err(Error::invalid("init_lambda must be a probability"));
        }
        if self.init_g0_var <= 0.0 || self.init_noise_var < 0.0 {
            return Err(Error::invalid("initial variances must be positive"));
        }
        match self.rank_mode {
            RankMode::Fixed(r) | RankMode::Auto(r) if r == 0 => {
                Err(Error::invalid("rank must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Final output of a reconstruction run.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Posterior mean of the sparse-domain signal matrix.
    pub x_hat: Array2<f64>,
    /// Dense-domain estimate `basis · x_hat`.
    pub f_hat: Array2<f64>,
    /// Row factor of the final factorization (absent for ablations).
    pub g_hat: Option<Array2<f64>>,
    /// Frame factor of the final factorization (absent for ablations).
    pub l_hat: Option<Array2<f64>>,
    /// Selected factorization rank (absent for ablations).
    pub rank: Option<usize>,
    /// Posterior probability that each row is active.
    pub support_row: Array1<f64>,
    /// Hyperparameters after each outer iteration.
    pub hyper_trace: Vec<Hyperparams>,
    /// Relative change of the signal estimate per outer iteration.
    pub convergence_trace: Vec<f64>,
    pub outer_iters: usize,
}

/// Which parts of the machinery a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Support messages and factorization phase both active.
    Full,
    /// Per-frame recovery with per-frame EM; no coupling of any kind.
    Independent,
    /// Support messages active, factorization phase disabled.
    JointSparse,
}

/// Relative Frobenius change between successive signal estimates, with a
/// guarded denominator.
pub fn turbo_convergence(x_prev: &Array2<f64>, x_curr: &Array2<f64>) -> Result<f64> {
    if x_prev.dim() != x_curr.dim() {
        return Err(Error::invalid("turbo_convergence: shape mismatch"));
    }
    let diff = x_curr - x_prev;
    Ok(linalg::fro_norm(&diff) / linalg::fro_norm(x_prev).max(1e-12))
}

/// Full reconstruction: alternates the per-frame phase and the
/// factorization phase with support-message exchange and EM tuning.
pub fn run_ls_amp(
    meas: &MeasurementSet,
    basis: &Array2<f64>,
    config: &TurboConfig,
) -> Result<Reconstruction> {
    run_reconstruction(meas, basis, config, Mode::Full)
}

/// EM refresh of the global hyperparameters from one outer iteration's
/// posteriors: sparsity rate from the row posteriors, slab moments from the
/// activity-weighted factor posteriors, noise from the measurement
/// residuals.
pub fn em_update(
    hyper: &Hyperparams,
    meas: &MeasurementSet,
    frames: &[FrameResult],
    factors: &FactorEstimate,
    support: &SupportBeliefs,
    shared_noise: bool,
) -> Result<Hyperparams> {
    if frames.len() != meas.frames() {
        return Err(Error::invalid("em_update: frame count mismatch"));
    }
    let lambda = support.row_posterior.mean().unwrap_or(hyper.lambda);
    let (g0_mean, g0_var) = slab_moments(
        &factors.g_support,
        &factors.g_active_mean,
        &factors.g_active_var,
        hyper.g0_mean,
        hyper.g0_var,
    );
    let noise_var = noise_update(meas, frames, shared_noise);
    Hyperparams::new(lambda, g0_mean, g0_var, noise_var, factors.rank)
}

/// Activity-weighted first and second central moments of slab posteriors.
fn slab_moments(
    weight: &Array2<f64>,
    cond_mean: &Array2<f64>,
    cond_var: &Array2<f64>,
    fallback_mean: f64,
    fallback_var: f64,
) -> (f64, f64) {
    let total: f64 = weight.sum();
    if total < 1e-9 {
        return (fallback_mean, fallback_var);
    }
    let mean = weight
        .iter()
        .zip(cond_mean.iter())
        .map(|(w, m)| w * m)
        .sum::<f64>()
        / total;
    let var = weight
        .iter()
        .zip(cond_mean.iter())
        .zip(cond_var.iter())
        .map(|((w, m), v)| w * (v + (m - mean) * (m - mean)))
        .sum::<f64>()
        / total;
    (mean, var.max(VAR_FLOOR))
}

fn noise_update(meas: &MeasurementSet, frames: &[FrameResult], shared: bool) -> Vec<f64> {
    let per_frame: Vec<f64> = frames
        .iter()
        .zip(&meas.observations)
        .map(|(fr, y)| {
            let m = y.len() as f64;
            let mut acc = 0.0;
            for i in 0..y.len() {
                let r = y[i] - fr.z_hat[i];
                acc += r * r + fr.z_var[i];
            }
            (acc / m).max(VAR_FLOOR)
        })
        .collect();
    if shared {
        let weights: Vec<f64> = meas.observations.iter().map(|y| y.len() as f64).collect();
        let total_m: f64 = weights.iter().sum();
        let pooled = per_frame
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / total_m;
        vec![pooled.max(VAR_FLOOR); per_frame.len()]
    } else {
        per_frame
    }
}

/// Posterior means (and variances) of every signal entry under the current
/// prior field.
fn posterior_field(
    u: &Array2<f64>,
    vu: &Array2<f64>,
    prior: &BgPriorField,
) -> (Array2<f64>, Array2<f64>) {
    let (n, t) = u.dim();
    let mut mean = Array2::zeros((n, t));
    let mut var = Array2::zeros((n, t));
    for i in 0..n {
        for j in 0..t {
            let m = bg_posterior_moments_unchecked(
                u[(i, j)],
                vu[(i, j)],
                prior.support_prob[(i, j)],
                prior.active_mean[(i, j)],
                prior.active_var[(i, j)],
            );
            mean[(i, j)] = m.mean;
            var[(i, j)] = m.var;
        }
    }
    (mean, var)
}

struct PhaseOutputs {
    frames: Vec<FrameResult>,
    u: Array2<f64>,
    vu: Array2<f64>,
}

fn run_frame_phase(
    meas: &MeasurementSet,
    prior: &BgPriorField,
    noise_var: &[f64],
    opts: &GampOptions,
) -> Result<PhaseOutputs> {
    let n = meas.signal_dim();
    let t = meas.frames();
    let frames: Vec<FrameResult> = (0..t)
        .into_par_iter()
        .map(|frame| {
            let problem = FrameProblem {
                matrix: &meas.matrices[frame],
                observation: &meas.observations[frame],
                prior: PriorColumn::from_field(prior, frame),
                noise_var: noise_var[frame],
            };
            gamp_solve_frame(&problem, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut u = Array2::zeros((n, t));
    let mut vu = Array2::zeros((n, t));
    for (frame, fr) in frames.iter().enumerate() {
        u.column_mut(frame).assign(&fr.u_hat);
        vu.column_mut(frame).assign(&fr.u_var.mapv(|v| v.max(VAR_FLOOR)));
    }
    Ok(PhaseOutputs { frames, u, vu })
}

pub(crate) fn run_reconstruction(
    meas: &MeasurementSet,
    basis: &Array2<f64>,
    config: &TurboConfig,
    mode: Mode,
) -> Result<Reconstruction> {
    meas.validate()?;
    config.validate()?;
    let n = meas.signal_dim();
    let t = meas.frames();
    if basis.nrows() != n || basis.ncols() != n {
        return Err(Error::invalid(format!(
            "basis is {}×{} but the signal dimension is {n}",
            basis.nrows(),
            basis.ncols()
        )));
    }
    if linalg::orthonormality_error(basis) > 1e-8 {
        return Err(Error::invalid("basis is not orthonormal"));
    }
    // A fixed rank must fit the problem; the auto cap just saturates.
    if let RankMode::Fixed(r) = config.rank_mode {
        if r > n.min(t) {
            return Err(Error::invalid(format!(
                "rank {r} exceeds min(N, T) = {}",
                n.min(t)
            )));
        }
    }

    // Initial prior field and hyperparameters.
    let mut prior = BgPriorField::flat(
        n,
        t,
        config.init_lambda,
        config.init_g0_mean,
        config.init_g0_var,
    );
    let init_rank = match config.rank_mode {
        RankMode::Fixed(r) | RankMode::Auto(r) => r,
    };
    let mut hyper = Hyperparams::new(
        config.init_lambda,
        config.init_g0_mean,
        config.init_g0_var,
        vec![config.init_noise_var; t],
        init_rank,
    )?;
    // Per-frame hyperparameters for the fully independent ablation.
    let mut frame_lambda = vec![config.init_lambda; t];
    let mut frame_g0 = vec![(config.init_g0_mean, config.init_g0_var); t];

    let mut x_prev: Array2<f64> = Array2::zeros((n, t));
    let mut selected_rank: Option<usize> = match config.rank_mode {
        RankMode::Fixed(r) => Some(r),
        RankMode::Auto(_) => None,
    };
    let mut last_factors: Option<FactorEstimate> = None;
    let mut support_row = Array1::from_elem(n, clamp_prob(config.init_lambda));
    let mut hyper_trace = Vec::new();
    let mut convergence_trace = Vec::new();
    let mut outer_iters = 0;

    for outer in 1..=config.max_outer_iters {
        outer_iters = outer;

        // Per-frame linear phase; one deterministic retry at half the step
        // size (double the retained fraction's complement).
        let phase = run_frame_phase(meas, &prior, &hyper.noise_var, &config.gamp).or_else(|_| {
            let softer = GampOptions {
                damping: 1.0 - (1.0 - config.gamp.damping) * 0.5,
                ..config.gamp.clone()
            };
            run_frame_phase(meas, &prior, &hyper.noise_var, &softer)
        });
        let phase = match phase {
            Ok(p) => p,
            Err(_) => {
                return Err(Error::TurboDiverged {
                    phase: "m-gamp",
                    outer_iter: outer,
                    last_x_hat: Box::new(x_prev),
                })
            }
        };

        // Local support beliefs from the extrinsic messages and the slab
        // parameters the frames just used.
        let local =
            support_posterior_field(&phase.u, &phase.vu, &prior.active_mean, &prior.active_var)?;

        let in_warmup = mode == Mode::Full && outer <= config.warmup_iters;
        let couple_support = match mode {
            Mode::Independent => false,
            Mode::Full => !in_warmup,
            Mode::JointSparse => true,
        };

        let lambda_for_rows = match mode {
            Mode::Independent => {
                frame_lambda.iter().sum::<f64>() / frame_lambda.len() as f64
            }
            _ => hyper.lambda,
        };
        let row_posterior = row_support_posterior(lambda_for_rows, &local)?;
        support_row = row_posterior.clone();

        let beliefs = SupportBeliefs {
            outgoing: if couple_support {
                support_outgoing(hyper.lambda, &local)?
            } else {
                prior.support_prob.clone()
            },
            posterior_local: local,
            row_posterior,
        };
        if couple_support {
            prior.support_prob = beliefs.outgoing.clone();
        }

        // Factorization phase (full algorithm only, after warmup).
        match mode {
            Mode::Full if in_warmup => {
                // Uncoupled warmup: global EM on the entry posteriors, flat
                // support field at the current rate.
                let (lam, g0, v0, noise) = entrywise_em(
                    &phase,
                    &prior,
                    meas,
                    hyper.lambda,
                    (hyper.g0_mean, hyper.g0_var),
                    config.shared_noise_var,
                );
                hyper = Hyperparams::new(lam, g0, v0, noise, hyper.rank)?;
                prior.support_prob.fill(clamp_prob(hyper.lambda));
                prior.active_mean.fill(hyper.g0_mean);
                prior.active_var.fill(hyper.g0_var.max(VAR_FLOOR));
            }
            Mode::Full => {
                let obs = PseudoObservation::new(phase.u.clone(), phase.vu.clone())?;
                if selected_rank.is_none() || config.reselect_rank {
                    // In-loop rank witness: the denoised posterior spectrum
                    // separates signal directions from the reconstruction
                    // error floor by a wide margin after warmup, so the
                    // largest spectral gap marks the rank. Scale-free, so
                    // it needs no noise calibration (the penalized
                    // likelihood rule stays available for direct
                    // pseudo-observations, where its calibration holds).
                    let cap = match config.rank_mode {
                        RankMode::Auto(cap) => cap.min(n.min(t)),
                        RankMode::Fixed(r) => r,
                    };
                    let (post_mean, _) = posterior_field(&phase.u, &phase.vu, &prior);
                    let sv = linalg::singular_values(&post_mean);
                    let floor = sv[0].max(1e-300) * 1e-8;
                    let mut best_i = 1;
                    let mut best_ratio = 0.0;
                    for i in 1..=cap.min(sv.len() - 1) {
                        let ratio = sv[i - 1].max(floor) / sv[i].max(floor);
                        if ratio > best_ratio {
                            best_ratio = ratio;
                            best_i = i;
                        }
                    }
                    selected_rank = Some(best_i);
                }
                let rank = selected_rank.unwrap_or(1);
                hyper.rank = rank;
                let mut bopts = config.bigamp.clone();
                bopts.init_seed = derive_seed(config.master_seed, "bigamp-init", outer as u64);
                let fe = bigamp_solve(&obs, rank, &hyper, &beliefs.row_posterior, &bopts)
                    .or_else(|_| {
                        let softer = BigAmpOptions {
                            damping: 1.0 - (1.0 - bopts.damping) * 0.5,
                            ..bopts.clone()
                        };
                        bigamp_solve(&obs, rank, &hyper, &beliefs.row_posterior, &softer)
                    });
                let fe = match fe {
                    Ok(fe) => fe,
                    Err(_) => {
                        return Err(Error::TurboDiverged {
                            phase: "factorization",
                            outer_iter: outer,
                            last_x_hat: Box::new(x_prev),
                        })
                    }
                };
                prior.active_mean = fe.q_hat.clone();
                prior.active_var = fe.q_var.mapv(|v| v.max(VAR_FLOOR));
                hyper = em_update(
                    &hyper,
                    meas,
                    &phase.frames,
                    &fe,
                    &beliefs,
                    config.shared_noise_var,
                )?;
                last_factors = Some(fe);
            }
            Mode::JointSparse => {
                // Amplitude phase disabled: slab parameters pinned at the
                // global prior, EM learns them from the entry posteriors.
                let (lam, g0, v0, noise) = entrywise_em(
                    &phase,
                    &prior,
                    meas,
                    hyper.lambda,
                    (hyper.g0_mean, hyper.g0_var),
                    config.shared_noise_var,
                );
                hyper =
                    Hyperparams::new(lam, g0, v0, noise, hyper.rank)?;
                prior.active_mean.fill(hyper.g0_mean);
                prior.active_var.fill(hyper.g0_var.max(VAR_FLOOR));
            }
            Mode::Independent => {
                // Per-frame EM, no information crosses frames.
                let noise = noise_update(meas, &phase.frames, config.shared_noise_var);
                for frame in 0..t {
                    let (lam_t, g0_t, v0_t) =
                        per_frame_em(&phase, &prior, frame, frame_g0[frame]);
                    frame_lambda[frame] = lam_t;
                    frame_g0[frame] = (g0_t, v0_t);
                    prior
                        .support_prob
                        .column_mut(frame)
                        .fill(clamp_prob(lam_t));
                    prior.active_mean.column_mut(frame).fill(g0_t);
                    prior.active_var.column_mut(frame).fill(v0_t.max(VAR_FLOOR));
                }
                let mean_lambda =
                    frame_lambda.iter().sum::<f64>() / frame_lambda.len() as f64;
                let mean_g0 = frame_g0.iter().map(|g| g.0).sum::<f64>() / t as f64;
                let mean_v0 = frame_g0.iter().map(|g| g.1).sum::<f64>() / t as f64;
                hyper = Hyperparams::new(mean_lambda, mean_g0, mean_v0, noise, hyper.rank)?;
            }
        }

        // Posterior signal estimate under the refreshed prior field.
        let (x_hat, _) = posterior_field(&phase.u, &phase.vu, &prior);
        if std::env::var("LSAMP_DEBUG").is_ok() {
            let sv = linalg::singular_values(&phase.u);
            eprintln!(
                "[outer {outer}] rank={selected_rank:?} mean_vu={:.3e} mean_vq={:.3e} mean|q|={:.3e} sv(u)={:.2e},{:.2e},{:.2e},{:.2e},{:.2e} lam={:.3} tau0={:.2e} row>{:.2}: {}",
                phase.vu.mean().unwrap_or(0.0),
                prior.active_var.mean().unwrap_or(0.0),
                prior.active_mean.mapv(f64::abs).mean().unwrap_or(0.0),
                sv[0], sv[1], sv[2], sv[3], sv[4],
                hyper.lambda,
                hyper.noise_var[0],
                0.5,
                support_row.iter().filter(|&&p| p > 0.5).count(),
            );
        }
        let change = turbo_convergence(&x_prev, &x_hat)?;
        convergence_trace.push(change);
        hyper_trace.push(hyper.clone());
        x_prev = x_hat;
        if change <= config.outer_tol {
            break;
        }
    }

    let f_hat = basis.dot(&x_prev);
    Ok(Reconstruction {
        x_hat: x_prev,
        f_hat,
        g_hat: last_factors.as_ref().map(|fe| fe.g_hat.clone()),
        l_hat: last_factors.as_ref().map(|fe| fe.l_hat.clone()),
        rank: last_factors.as_ref().map(|fe| fe.rank),
        support_row,
        hyper_trace,
        convergence_trace,
        outer_iters,
    })
}

/// EM statistics for the support-only ablation: slab moments come from the
/// signal-entry posteriors instead of factor posteriors.
fn entrywise_em(
    phase: &PhaseOutputs,
    prior: &BgPriorField,
    meas: &MeasurementSet,
    old_lambda: f64,
    old_g0: (f64, f64),
    shared_noise: bool,
) -> (f64, f64, f64, Vec<f64>) {
    let (n, t) = phase.u.dim();
    let mut w_sum = 0.0;
    let mut wm_sum = 0.0;
    let mut entries = Vec::with_capacity(n * t);
    for i in 0..n {
        for j in 0..t {
            let m = bg_posterior_moments_unchecked(
                phase.u[(i, j)],
                phase.vu[(i, j)],
                prior.support_prob[(i, j)],
                prior.active_mean[(i, j)],
                prior.active_var[(i, j)],
            );
            let (cm, cv) = crate::priors::bg_conditional_moments(
                phase.u[(i, j)],
                phase.vu[(i, j)],
                prior.active_mean[(i, j)],
                prior.active_var[(i, j)],
            );
            w_sum += m.support_prob;
            wm_sum += m.support_prob * cm;
            entries.push((m.support_prob, cm, cv));
        }
    }
    let (g0, v0) = if w_sum < 1e-9 {
        old_g0
    } else {
        let mean = wm_sum / w_sum;
        let var = entries
            .iter()
            .map(|(w, m, v)| w * (v + (m - mean) * (m - mean)))
            .sum::<f64>()
            / w_sum;
        (mean, var.max(VAR_FLOOR))
    };
    // Mean entry activity, not the row-product posterior: products over many
    // frames saturate and freeze the rate while the noise estimate is still
    // annealing.
    let lambda = if (n * t) > 0 {
        w_sum / (n * t) as f64
    } else {
        old_lambda
    };
    let noise = noise_update(meas, &phase.frames, shared_noise);
    (lambda, g0, v0, noise)
}

/// Per-frame EM statistics for the fully independent ablation.
fn per_frame_em(
    phase: &PhaseOutputs,
    prior: &BgPriorField,
    frame: usize,
    old_g0: (f64, f64),
) -> (f64, f64, f64) {
    let n = phase.u.nrows();
    let mut w_sum = 0.0;
    let mut wm_sum = 0.0;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let m = bg_posterior_moments_unchecked(
            phase.u[(i, frame)],
            phase.vu[(i, frame)],
            prior.support_prob[(i, frame)],
            prior.active_mean[(i, frame)],
            prior.active_var[(i, frame)],
        );
        let (cm, cv) = crate::priors::bg_conditional_moments(
            phase.u[(i, frame)],
            phase.vu[(i, frame)],
            prior.active_mean[(i, frame)],
            prior.active_var[(i, frame)],
        );
        w_sum += m.support_prob;
        wm_sum += m.support_prob * cm;
        entries.push((m.support_prob, cm, cv));
    }
    let lambda = clamp_prob(w_sum / n as f64);
    if w_sum < 1e-9 {
        return (lambda, old_g0.0, old_g0.1);
    }
    let mean = wm_sum / w_sum;
    let var = entries
        .iter()
        .map(|(w, m, v)| w * (v + (m - mean) * (m - mean)))
        .sum::<f64>()
        / w_sum;
    (lambda, mean, var.max(VAR_FLOOR))
}
