use lsamp::gamp::*;
use lsamp::priors::BgPriorField;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn main() {
    let n = 4;
    let a = Array2::eye(n);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let y: Array1<f64> = Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let field = BgPriorField::flat(n, 1, 1.0, 0.0, 1e6);
    let problem = FrameProblem { matrix: &a, observation: &y, prior: PriorColumn::from_field(&field, 0), noise_var: 1e-12 };
    for max in [100usize, 100_000, 2_000_000, 6_000_000] {
        let t0 = Instant::now();
        let opts = GampOptions { max_iters: max, tol: 1e-16, ..Default::default() };
        let res = gamp_solve_frame(&problem, &opts).unwrap();
        let err: f64 = res.x_hat.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("max={max:>9} iters={} err={:.3e} u_var={:.3e} dt={:?}", res.iters, err, res.u_var[0], t0.elapsed());
    }
}
