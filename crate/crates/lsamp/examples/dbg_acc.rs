// Probes the oracle-gap and ablation-gap operating points.
use lsamp::harness::baselines::baseline_independent;
use lsamp::harness::metrics::{cnmse, cnmse_db};
use lsamp::priors::Hyperparams;
use lsamp::sensing::*;
use lsamp::turbo::{run_ls_amp, RankMode, TurboConfig};
use ndarray::{Array1, Array2};

// Least squares for the row factor given true support and true frame factor.
fn ls_oracle(e: &SignalEnsemble, meas: &MeasurementSet) -> Array2<f64> {
    let (n, t) = e.x.dim();
    let r = e.l.nrows();
    let active: Vec<usize> = (0..n).filter(|&i| e.support[i]).collect();
    let k = active.len();
    let p = k * r;
    // Normal equations over vec(H_active).
    let mut ata = vec![vec![0.0f64; p]; p];
    let mut atb = vec![0.0f64; p];
    for frame in 0..t {
        let a = &meas.matrices[frame];
        let y = &meas.observations[frame];
        let m = a.nrows();
        // design row block: y_m = sum_{k,r} A[m, active[k]] * l[r, frame] * H[k, r]
        let mut design = vec![vec![0.0f64; p]; m];
        for mm in 0..m {
            for (ki, &row) in active.iter().enumerate() {
                for rr in 0..r {
                    design[mm][ki * r + rr] = a[(mm, row)] * e.l[(rr, frame)];
                }
            }
        }
        for mm in 0..m {
            for i in 0..p {
                atb[i] += design[mm][i] * y[mm];
                for j in 0..p {
                    ata[i][j] += design[mm][i] * design[mm][j];
                }
            }
        }
    }
    // Plain Gaussian elimination with partial pivoting.
    let mut aug = ata;
    for i in 0..p { aug[i].push(atb[i]); }
    for col in 0..p {
        let mut piv = col;
        for row in col + 1..p { if aug[row][col].abs() > aug[piv][col].abs() { piv = row; } }
        aug.swap(col, piv);
        let d = aug[col][col];
        if d.abs() < 1e-300 { continue; }
        for row in 0..p {
            if row != col && aug[row][col] != 0.0 {
                let f = aug[row][col] / d;
                for j in col..=p { let v = aug[col][j]; aug[row][j] -= f * v; }
            }
        }
    }
    let mut h = Array2::zeros((n, r));
    for (ki, &row) in active.iter().enumerate() {
        for rr in 0..r {
            h[(row, rr)] = aug[ki * r + rr][p] / aug[ki * r + rr][ki * r + rr];
        }
    }
    let mut x = h.dot(&e.l);
    for i in 0..n { if !e.support[i] { x.row_mut(i).fill(0.0); } }
    x
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ratio: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.35);
    let seeds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let (n, t, r, k) = (128usize, 32usize, 3usize, 16usize);
    let m = ((ratio * n as f64).round() as usize).max(1);
    let gen_hyper = Hyperparams::new(k as f64 / n as f64, 0.0, 1.0, vec![1.0; t], r).unwrap();
    let mut ls_db = vec![];
    let mut orc_db = vec![];
    let mut ind_db = vec![];
    for seed in 0..seeds {
        let e = gen_ls_signal(n, t, r, k, &gen_hyper, derive_seed(100, "sig", seed)).unwrap();
        let meas = acquire_signal(&e.x, m, EnsembleKind::Gaussian, 25.0, derive_seed(100, "acq", seed)).unwrap();
        let basis = dct_basis(n).unwrap();
        let config = TurboConfig { master_seed: derive_seed(100, "turbo", seed), rank_mode: RankMode::Auto(8), ..TurboConfig::default() };
        let t0 = std::time::Instant::now();
        let rec = run_ls_amp(&meas, &basis, &config).unwrap();
        let dt_ls = t0.elapsed();
        let t0 = std::time::Instant::now();
        let ind = baseline_independent(&meas, &basis, &config).unwrap();
        let dt_in = t0.elapsed();
        let xo = ls_oracle(&e, &meas);
        let c_ls = cnmse_db(cnmse(&e.x, &rec.x_hat).unwrap());
        let c_or = cnmse_db(cnmse(&e.x, &xo).unwrap());
        let c_in = cnmse_db(cnmse(&e.x, &ind.x_hat).unwrap());
        println!("seed {seed}: lsamp {c_ls:7.2} dB ({}it {dt_ls:.1?})  oracle {c_or:7.2} dB  indep {c_in:7.2} dB ({dt_in:.1?}) rank={:?}", rec.outer_iters, rec.rank);
        ls_db.push(c_ls); orc_db.push(c_or); ind_db.push(c_in);
    }
    let med = |v: &mut Vec<f64>| { v.sort_by(|a, b| a.partial_cmp(b).unwrap()); let n = v.len(); if n % 2 == 1 { v[n/2] } else { 0.5*(v[n/2-1]+v[n/2]) } };
    let (m_ls, m_or, m_in) = (med(&mut ls_db), med(&mut orc_db), med(&mut ind_db));
    println!("medians: lsamp {m_ls:.2} dB, oracle {m_or:.2} dB, independent {m_in:.2} dB");
    println!("oracle gap {:.2} dB (need <= 5), ablation gain {:.2} dB (need >= 3 at ratio 0.30)", m_ls - m_or, m_in - m_ls);
}
