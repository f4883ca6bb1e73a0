use lsamp::bigamp::{select_rank, PseudoObservation, RankSelectOptions};
use lsamp::harness::baselines::baseline_jointsparse;
use lsamp::priors::{bg_posterior_moments, Hyperparams};
use lsamp::sensing::*;
use lsamp::linalg;
use lsamp::turbo::TurboConfig;
use ndarray::Array2;

fn main() {
    // Mimic the state right after a 6-iteration warmup by running the
    // amplitude-off baseline, then reconstruct the posterior field inputs.
    let (n, t, r, k) = (128usize, 32usize, 3usize, 16usize);
    let m = 45usize;
    let gen_hyper = Hyperparams::new(k as f64 / n as f64, 0.0, 1.0, vec![1.0; t], r).unwrap();
    for seed in 0..4u64 {
        let e = gen_ls_signal(n, t, r, k, &gen_hyper, derive_seed(100, "sig", seed)).unwrap();
        let meas = acquire_signal(&e.x, m, EnsembleKind::Gaussian, 25.0, derive_seed(100, "acq", seed)).unwrap();
        let basis = dct_basis(n).unwrap();
        let config = TurboConfig { master_seed: 1, max_outer_iters: 6, ..TurboConfig::default() };
        let rec = baseline_jointsparse(&meas, &basis, &config).unwrap();
        // Posterior spectrum proxy: X̂ itself.
        let sv = linalg::singular_values(&rec.x_hat);
        let true_sv = linalg::singular_values(&e.x);
        println!("seed {seed}: sv(Xhat) {:.1} {:.1} {:.1} {:.1} {:.1} {:.1} | sv(X) {:.1} {:.1} {:.1} {:.1}",
            sv[0], sv[1], sv[2], sv[3], sv[4], sv[5], true_sv[0], true_sv[1], true_sv[2], true_sv[3]);
        // Evaluate scores for candidate noise levels.
        let energy: f64 = sv.iter().map(|s| s * s).sum();
        for nu in [1e-2f64, 1e-1] {
            print!("  nu={nu:.0e}: scores ");
            let ln_nt = ((n * t) as f64).ln();
            let mut resid = energy;
            let mut scores = vec![];
            for rr in 1..=6usize {
                resid -= sv[rr - 1] * sv[rr - 1];
                scores.push(-resid / nu - 2.0 * rr as f64 * (n + t - rr) as f64 * ln_nt);
            }
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (i, s) in scores.iter().enumerate() { print!("r{}:{:.0}{} ", i + 1, s - best, if *s == best {"*"} else {""}); }
            println!();
        }
        let obs = PseudoObservation::new(rec.x_hat.clone(), Array2::from_elem((n, t), 0.05)).unwrap();
        println!("  select_rank(posterior, nu=0.05): {}", select_rank(&obs, 8, &RankSelectOptions::default()).unwrap());
    }
}
