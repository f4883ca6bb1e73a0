use lsamp::harness::baselines::baseline_independent;
use lsamp::harness::metrics::cnmse;
use lsamp::priors::Hyperparams;
use lsamp::sensing::{dct_basis, gen_ls_signal, EnsembleKind, MeasurementSet};
use lsamp::turbo::TurboConfig;
use ndarray::Array2;

fn main() {
    let hyper = Hyperparams::new(0.25, 0.0, 1.0, vec![1.0; 8], 2).unwrap();
    let e = gen_ls_signal(32, 8, 2, 8, &hyper, 3).unwrap();
    let meas = MeasurementSet {
        matrices: vec![Array2::eye(32); 8],
        observations: (0..8).map(|j| e.x.column(j).to_owned()).collect(),
        noise_var: vec![1e-12; 8],
        kind: EnsembleKind::CommonGaussian,
    };
    let basis = dct_basis(32).unwrap();
    for (max_outer, inner, damp) in [(20usize, 100usize, 0.7f64), (20, 1000, 0.7), (30, 4000, 0.0), (30, 20000, 0.0)] {
        let mut config = TurboConfig { max_outer_iters: max_outer, ..TurboConfig::default() };
        config.gamp.max_iters = inner;
        config.gamp.damping = damp;
        config.gamp.tol = 1e-12;
        let t0 = std::time::Instant::now();
        let rec = baseline_independent(&meas, &basis, &config).unwrap();
        let err = cnmse(&e.x, &rec.x_hat).unwrap();
        let taus: Vec<f64> = rec.hyper_trace.iter().map(|h| h.noise_var[0]).collect();
        println!("outer={max_outer} inner={inner} damp={damp}: used={} cnmse={err:.3e} dt={:?} tau_last={:.2e}", rec.outer_iters, t0.elapsed(), taus.last().unwrap());
        println!("  lambda trace: {:?}", rec.hyper_trace.iter().take(8).map(|h| (h.lambda*1e4).round()/1e4).collect::<Vec<_>>());
        println!("  g0 {:.4} v0 {:.4}", rec.hyper_trace.last().unwrap().g0_mean, rec.hyper_trace.last().unwrap().g0_var);
        let col = 0usize;
        for i in 0..8 {
            println!("    x[{i},0]={:+.3} xhat={:+.3} support_row={:.3}", e.x[(i, col)], rec.x_hat[(i, col)], rec.support_row[i]);
        }
    }
}
// (second pass appended below via separate binary not needed)
