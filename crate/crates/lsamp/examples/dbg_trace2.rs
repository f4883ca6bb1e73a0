use lsamp::harness::baselines::baseline_independent;
use lsamp::harness::metrics::{cnmse, cnmse_db};
use lsamp::priors::Hyperparams;
use lsamp::sensing::*;
use lsamp::turbo::{run_ls_amp, RankMode, TurboConfig};

fn main() {
    let (n, t, r, k) = (128usize, 32usize, 3usize, 16usize);
    let m = 45usize;
    let gen_hyper = Hyperparams::new(k as f64 / n as f64, 0.0, 1.0, vec![1.0; t], r).unwrap();
    let e = gen_ls_signal(n, t, r, k, &gen_hyper, derive_seed(100, "sig", 0)).unwrap();
    let meas = acquire_signal(&e.x, m, EnsembleKind::Gaussian, 25.0, derive_seed(100, "acq", 0)).unwrap();
    let basis = dct_basis(n).unwrap();
    println!("true tau[0] = {:.3e}", meas.noise_var[0]);
    for (label, rmode, max_outer, warmup) in [("auto-w4", RankMode::Auto(8), 30usize, 4usize), ("auto-w6", RankMode::Auto(8), 30, 6), ("auto-w8", RankMode::Auto(8), 32, 8)] {
        let config = TurboConfig { master_seed: 1, rank_mode: rmode, max_outer_iters: max_outer, warmup_iters: warmup, ..TurboConfig::default() };
        let rec = run_ls_amp(&meas, &basis, &config).unwrap();
        println!("{label}: cnmse {:.2} dB rank {:?} outers {}", cnmse_db(cnmse(&e.x, &rec.x_hat).unwrap()), rec.rank, rec.outer_iters);
        print!("  lambda: "); for h in rec.hyper_trace.iter().take(12) { print!("{:.3} ", h.lambda); } println!();
        print!("  tau[0]: "); for h in rec.hyper_trace.iter().take(12) { print!("{:.1e} ", h.noise_var[0]); } println!();
        print!("  conv:   "); for c in rec.convergence_trace.iter().take(12) { print!("{:.1e} ", c); } println!();
    }
    let config = TurboConfig { master_seed: 1, max_outer_iters: 40, ..TurboConfig::default() };
    let ind = baseline_independent(&meas, &basis, &config).unwrap();
    println!("independent-40: cnmse {:.2} dB outers {}", cnmse_db(cnmse(&e.x, &ind.x_hat).unwrap()), ind.outer_iters);
    print!("  tau[0]: "); for h in ind.hyper_trace.iter().take(16) { print!("{:.1e} ", h.noise_var[0]); } println!();
}
