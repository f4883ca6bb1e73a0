use lsamp::bigamp::*;
use lsamp::priors::Hyperparams;
use lsamp::linalg;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let x = Array2::from_shape_fn((12, 8), |_| StandardNormal.sample(&mut rng));
    let obs = PseudoObservation::new(x.clone(), Array2::from_elem((12, 8), 1e-9)).unwrap();
    // Sweep slab variance and activity to find where the zero saddle traps the solver.
    for (vg, lam) in [(100.0, 0.99), (10.0, 0.99), (2.0, 0.9), (1.0, 0.9)] {
        let h = Hyperparams::new(lam, 0.0, vg, vec![1.0; 8], 8).unwrap();
        let support = Array1::from_elem(12, lam);
        let opts = BigAmpOptions { max_iters: 1000, ..Default::default() };
        match bigamp_solve(&obs, 8, &h, &support, &opts) {
            Ok(fe) => {
                let fit = linalg::fro_norm(&(&fe.g_hat.dot(&fe.l_hat) - &x)) / linalg::fro_norm(&x);
                println!("vg={vg} lam={lam}: fit={fit:.3e} iters={} |G|={:.2e}", fe.iters, linalg::fro_norm(&fe.g_hat));
            }
            Err(e) => println!("vg={vg} lam={lam}: {e}"),
        }
    }
    // Rank-2 case for reference (passes).
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let g = Array2::from_shape_fn((12, 2), |_| StandardNormal.sample(&mut rng));
    let l = Array2::from_shape_fn((2, 8), |_| StandardNormal.sample(&mut rng));
    let x2 = g.dot(&l);
    let obs2 = PseudoObservation::new(x2.clone(), Array2::from_elem((12, 8), 1e-9)).unwrap();
    let h = Hyperparams::new(0.9, 0.0, 1.0, vec![1.0; 8], 2).unwrap();
    let fe = bigamp_solve(&obs2, 2, &h, &Array1::from_elem(12, 0.9), &BigAmpOptions::default()).unwrap();
    let fit = linalg::fro_norm(&(&fe.g_hat.dot(&fe.l_hat) - &x2)) / linalg::fro_norm(&x2);
    println!("rank2 reference: fit={fit:.3e}");
}
