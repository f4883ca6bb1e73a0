// Compares damping placements for the bilinear recursion on a hard case.
use lsamp::priors::{bg_posterior_moments, ln_gauss};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn sigmoid(l: f64) -> f64 { if l >= 0.0 { 1.0/(1.0+(-l).exp()) } else { let e = l.exp(); e/(1.0+e) } }

#[derive(Clone, Copy, PartialEq)]
enum Scheme { PostDenoiser, SOnly, BarState }

fn run(scheme: Scheme, beta: f64, uvar: f64, seed: u64, iters: usize) -> (f64, bool) { run2(scheme, beta, uvar, seed, iters, false, false) }

fn run2(scheme: Scheme, beta: f64, uvar: f64, seed: u64, iters: usize, gauss_g: bool, rand_init: bool) -> (f64, bool) {
    let (n, t, r) = (std::env::var("NDIM").map(|v| v.parse().unwrap()).unwrap_or(12usize), std::env::var("TDIM").map(|v| v.parse().unwrap()).unwrap_or(8usize), std::env::var("RANK").map(|v| v.parse().unwrap()).unwrap_or(8usize));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g0t = Array2::from_shape_fn((n, r), |_| StandardNormal.sample(&mut rng));
    let l0t = Array2::from_shape_fn((r, t), |_| StandardNormal.sample(&mut rng));
    let x = if std::env::var("FULLRANK").is_ok() { g0t.dot(&l0t).mapv(|v: f64| v * 0.0) + Array2::from_shape_fn((n, t), |(_, _)| { let g: f64 = StandardNormal.sample(&mut rng); g }) } else { g0t.dot(&l0t) };
    let lam = 0.9f64; let vg: f64 = std::env::var("VG").map(|v| v.parse().unwrap()).unwrap_or(1.0);

    let mut rng2 = ChaCha20Rng::seed_from_u64(0);
    let mut l_hat = Array2::from_shape_fn((r, t), |_| StandardNormal.sample(&mut rng2));
    let mut l_var = Array2::from_elem((r, t), 1.0);
    let mut g_hat = if rand_init {
        Array2::from_shape_fn((n, r), |(_, _)| { let g: f64 = StandardNormal.sample(&mut rng2); g * std::env::var("GSCALE").map(|v| v.parse::<f64>().unwrap()).unwrap_or((lam * vg).sqrt()) })
    } else { Array2::from_elem((n, r), 0.0) };
    let mut g_var = Array2::from_elem((n, r), lam * vg);
    // bar copies for Scheme::BarState
    let mut g_bar = g_hat.clone();
    let mut l_bar = l_hat.clone();
    let mut s_hat: Array2<f64> = Array2::zeros((n, t));
    let mut s_var: Array2<f64> = Array2::zeros((n, t));

    for iter in 1..=iters {
        let (gu, lu) = match scheme { Scheme::BarState => (&g_bar, &l_bar), _ => (&g_hat, &l_hat) };
        let g2 = gu.mapv(|v: f64| v * v);
        let l2 = lu.mapv(|v: f64| v * v);
        let vbar_p = g2.dot(&l_var) + g_var.dot(&l2);
        let p_bar = gu.dot(lu);
        let v_p = &vbar_p + &g_var.dot(&l_var);
        let p_hat = &p_bar - &(&s_hat * &vbar_p);
        let denom = v_p.mapv(|v| v + uvar);
        let s_new = (&x - &p_hat) / &denom;
        let sv_new = denom.mapv(|d| 1.0 / d);
        if iter == 1 { s_hat = s_new; s_var = sv_new; }
        else { s_hat = &s_new * beta + &s_hat * (1.0 - beta); s_var = &sv_new * beta + &s_var * (1.0 - beta); }

        let vrl = g2.t().dot(&s_var).mapv(|d: f64| (1.0 / d.max(1e-12)).min(1e12));
        let shrink_l = (&vrl * &g_var.t().dot(&s_var)).mapv(|v| (1.0 - v).clamp(0.0, 1.0));
        let rl = lu * &shrink_l + &(&vrl * &gu.t().dot(&s_hat));
        let vrg = s_var.dot(&l2.t()).mapv(|d: f64| (1.0 / d.max(1e-12)).min(1e12));
        let shrink_g = (&vrg * &s_var.dot(&l_var.t())).mapv(|v| (1.0 - v).clamp(0.0, 1.0));
        let rg = gu * &shrink_g + &(&vrg * &s_hat.dot(&lu.t()));

        if rg.iter().any(|v: &f64| !v.is_finite()) || rl.iter().any(|v: &f64| !v.is_finite()) {
            return (f64::INFINITY, false);
        }
        let l_new = &rl / &vrl.mapv(|v| v + 1.0);
        let lv_new = vrl.mapv(|v| v / (v + 1.0));
        let mut g_new = Array2::zeros((n, r));
        let mut gv_new = Array2::zeros((n, r));
        let base = (lam / (1.0 - lam)).ln();
        for i in 0..n {
            let mut total = base;
            for k in 0..r { total += ln_gauss(rg[(i,k)], 0.0, vg + vrg[(i,k)]) - ln_gauss(rg[(i,k)], 0.0, vrg[(i,k)]); }
            for k in 0..r {
                let llr = ln_gauss(rg[(i,k)], 0.0, vg + vrg[(i,k)]) - ln_gauss(rg[(i,k)], 0.0, vrg[(i,k)]);
                let act = if gauss_g { 1.0 } else { sigmoid(total - llr) };
                let m = bg_posterior_moments(rg[(i,k)], vrg[(i,k)], act, 0.0, vg).unwrap();
                g_new[(i,k)] = m.mean; gv_new[(i,k)] = m.var;
            }
        }
        match scheme {
            Scheme::PostDenoiser => {
                if iter == 1 { g_hat = g_new; g_var = gv_new; l_hat = l_new; l_var = lv_new; }
                else {
                    g_hat = &g_new * beta + &g_hat * (1.0 - beta);
                    g_var = &gv_new * beta + &g_var * (1.0 - beta);
                    l_hat = &l_new * beta + &l_hat * (1.0 - beta);
                    l_var = &lv_new * beta + &l_var * (1.0 - beta);
                }
            }
            Scheme::SOnly => { g_hat = g_new; g_var = gv_new; l_hat = l_new; l_var = lv_new; }
            Scheme::BarState => {
                g_hat = g_new; g_var = gv_new; l_hat = l_new; l_var = lv_new;
                if iter == 1 { g_bar = g_hat.clone(); l_bar = l_hat.clone(); }
                else {
                    g_bar = &g_hat * beta + &g_bar * (1.0 - beta);
                    l_bar = &l_hat * beta + &l_bar * (1.0 - beta);
                }
            }
        }
        if g_hat.iter().any(|v| !v.is_finite()) || l_hat.iter().any(|v| !v.is_finite()) {
            return (f64::INFINITY, false);
        }
        if std::env::var("TRACE").is_ok() && seed == 0 && gauss_g && rand_init && (iter <= 15 || iter % 50 == 0) {
            let d = &g_hat.dot(&l_hat) - &x;
            let fit = (d.iter().map(|v| v*v).sum::<f64>() / x.iter().map(|v| v*v).sum::<f64>()).sqrt();
            println!("  it {iter:>3} fit {fit:9.3e} |G| {:8.2e} |L| {:8.2e} |s| {:8.2e} svar0 {:8.2e} vrg0 {:8.2e} gvar0 {:8.2e}",
                g_hat.iter().map(|v| v*v).sum::<f64>().sqrt(),
                l_hat.iter().map(|v| v*v).sum::<f64>().sqrt(),
                s_hat.iter().map(|v| v*v).sum::<f64>().sqrt(),
                s_var[(0,0)], vrg[(0,0)], g_var[(0,0)]);
        }
    }
    let d = &g_hat.dot(&l_hat) - &x;
    let fit = (d.iter().map(|v| v*v).sum::<f64>() / x.iter().map(|v| v*v).sum::<f64>()).sqrt();
    (fit, true)
}

fn main() {
    for (label, gauss_g, rand_init) in [("bg/zero", false, false), ("gauss/zero", true, false), ("bg/rand", false, true), ("gauss/rand", true, true)] {
        for beta in [0.25] {
            let mut ok = 0;
            let mut worst: f64 = 0.0;
            for seed in 0..20u64 {
                let uv: f64 = std::env::var("UVAR").map(|v| v.parse().unwrap()).unwrap_or(1e-9); let (fit, finite) = run2(Scheme::PostDenoiser, beta, uv, seed, 600, gauss_g, rand_init);
                if finite && fit <= 1e-2 { ok += 1; }
                if finite { worst = worst.max(fit); }
            }
            println!("{label:>10} beta={beta}: {ok}/20 fits<=1e-2, worst finite {worst:.2e}");
        }
    }
}
