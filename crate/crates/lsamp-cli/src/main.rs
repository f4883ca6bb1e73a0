//! Command-line driver: generate synthetic data, simulate acquisition,
//! reconstruct, and run sweeps.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 solver
//! divergence, 4 file I/O or format problems.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lsamp::harness::baselines::{baseline_independent, baseline_jointsparse};
use lsamp::harness::io;
use lsamp::harness::metrics::{cnmse_db, cnmse_detailed, support_metrics};
use lsamp::harness::sweep::{run_sweep, Algorithm, SweepSpec};
use lsamp::priors::Hyperparams;
use lsamp::sensing::{acquire_signal, cube_to_signal, dct_basis, gen_ls_signal, EnsembleKind};
use lsamp::turbo::{run_ls_amp, RankMode, TurboConfig};
use lsamp::Error;

#[derive(Parser)]
#[command(
    name = "lsamp",
    about = "Low-rank and joint-sparse signal recovery from compressed measurements",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank and joint-sparse signal.
    Generate {
        /// Signal dimension (rows).
        #[arg(long)]
        n: usize,
        /// Number of frames (columns).
        #[arg(long)]
        t: usize,
        /// Factorization rank.
        #[arg(long)]
        r: usize,
        /// Number of active rows.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Active-coefficient prior mean.
        #[arg(long, default_value_t = 0.0)]
        g0_mean: f64,
        /// Active-coefficient prior variance.
        #[arg(long, default_value_t = 1.0)]
        g0_var: f64,
        /// Output signal container (.lst1).
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate compressed acquisition of a signal or cube file.
    Acquire {
        /// Input: a signal container or a bare rows×cols×bands cube.
        #[arg(long = "in")]
        input: PathBuf,
        /// Compression ratio M/N in (0, 1].
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 25.0)]
        snr_db: f64,
        /// gaussian | rademacher | common
        #[arg(long, default_value = "gaussian")]
        ensemble: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output measurement container (.lst1).
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a signal matrix from a measurement container.
    Reconstruct {
        #[arg(long)]
        meas: PathBuf,
        /// Sparsifying basis (only "dct" is available).
        #[arg(long, default_value = "dct")]
        basis: String,
        /// lsamp | independent | jointsparse
        #[arg(long, default_value = "lsamp")]
        algo: String,
        /// "auto" or a fixed rank.
        #[arg(long, default_value = "auto")]
        rank: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        max_outer: usize,
        /// Output reconstruction container (.lst1).
        #[arg(long)]
        out: PathBuf,
        /// Optional metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Optional ground-truth signal container for error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run a CNMSE-versus-ratio sweep from a JSON spec.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for results.csv and the SVG chart.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::InvalidArgument(_) | Error::Config(_) | Error::DegenerateSignal(_) => 2,
                Error::SolverDiverged { .. } | Error::TurboDiverged { .. } => 3,
                Error::Format { .. } | Error::Io(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            n,
            t,
            r,
            k,
            seed,
            g0_mean,
            g0_var,
            out,
        } => {
            let hyper = Hyperparams::new(k as f64 / n as f64, g0_mean, g0_var, vec![1.0; t], r)?;
            let signal = gen_ls_signal(n, t, r, k, &hyper, seed)?;
            io::save_signal(&out, &signal)?;
            println!(
                "wrote signal {n}×{t} (rank {r}, {k} active rows) to {}",
                out.display()
            );
            Ok(())
        }
        Command::Acquire {
            input,
            ratio,
            snr_db,
            ensemble,
            seed,
            out,
        } => {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::InvalidArgument("ratio must lie in (0, 1]".into()));
            }
            let kind: EnsembleKind = ensemble.parse()?;
            let x = load_signal_matrix(&input)?;
            let m = ((ratio * x.nrows() as f64).round() as usize).max(1);
            let meas = acquire_signal(&x, m, kind, snr_db, seed)?;
            io::save_measurements(&out, &meas)?;
            println!(
                "acquired {} frames at M/N = {m}/{} ({} ensemble, SNR {snr_db} dB) to {}",
                x.ncols(),
                x.nrows(),
                kind_name(kind),
                out.display()
            );
            Ok(())
        }
        Command::Reconstruct {
            meas,
            basis,
            algo,
            rank,
            seed,
            max_outer,
            out,
            metrics,
            truth,
        } => {
            if basis != "dct" {
                return Err(Error::InvalidArgument(format!(
                    "unknown basis '{basis}' (only 'dct' is available)"
                )));
            }
            let algorithm: Algorithm = algo.parse()?;
            let meas = io::load_measurements(&meas)?;
            let n = meas.signal_dim();
            let t = meas.frames();
            let rank_mode = parse_rank(&rank, n.min(t))?;
            let psi = dct_basis(n)?;
            let config = TurboConfig {
                rank_mode,
                master_seed: seed,
                max_outer_iters: max_outer,
                ..TurboConfig::default()
            };
            let start = Instant::now();
            let rec = match algorithm {
                Algorithm::LsAmp => run_ls_amp(&meas, &psi, &config)?,
                Algorithm::Independent => baseline_independent(&meas, &psi, &config)?,
                Algorithm::JointSparse => baseline_jointsparse(&meas, &psi, &config)?,
            };
            let runtime_s = start.elapsed().as_secs_f64();
            io::save_reconstruction(&out, &rec)?;
            println!(
                "reconstructed {n}×{t} with {} in {} outer iterations ({runtime_s:.2}s) to {}",
                algorithm.name(),
                rec.outer_iters,
                out.display()
            );
            if let Some(metrics_path) = metrics {
                let mut header = String::from("algorithm,rank,outer_iters,runtime_s");
                let mut row = format!(
                    "{},{},{},{:.6}",
                    algorithm.name(),
                    rec.rank.map_or(0, |r| r),
                    rec.outer_iters,
                    runtime_s
                );
                if let Some(truth_path) = truth {
                    let signal = io::load_signal(&truth_path)?;
                    let (value, zero_cols) = cnmse_detailed(&signal.x, &rec.x_hat)?;
                    let (precision, recall, f1) =
                        support_metrics(&signal.support, &rec.support_row, 0.5)?;
                    header.push_str(",cnmse,cnmse_db,precision,recall,f1,zero_cols");
                    row.push_str(&format!(
                        ",{value:.9},{:.6},{precision:.6},{recall:.6},{f1:.6},{zero_cols}",
                        cnmse_db(value)
                    ));
                }
                std::fs::write(&metrics_path, format!("{header}\n{row}\n"))?;
                println!("metrics written to {}", metrics_path.display());
            }
            Ok(())
        }
        Command::Sweep { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let spec: SweepSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let summary = run_sweep(&spec, &out)?;
            println!(
                "sweep complete: {} rows in {}, chart in {}",
                summary.rows.len(),
                summary.csv_path.display(),
                summary.svg_path.display()
            );
            Ok(())
        }
    }
}

/// Accepts either a signal container or a bare 3-D cube record and returns
/// the sparse-domain signal matrix.
fn load_signal_matrix(path: &PathBuf) -> Result<ndarray::Array2<f64>, Error> {
    let records = io::read_tensors(path)?;
    if records.len() == 1 && records[0].dims.len() == 3 {
        let cube = records[0].to_cube()?;
        let bands = cube.dim().2;
        let psi = dct_basis(bands)?;
        let (x, _, layout) = cube_to_signal(&cube, &psi)?;
        println!(
            "ingested cube {}×{}×{} as {} pixel spectra",
            layout.rows, layout.cols, layout.bands,
            layout.pixels()
        );
        Ok(x)
    } else {
        Ok(io::load_signal(path)?.x)
    }
}

fn parse_rank(arg: &str, cap: usize) -> Result<RankMode, Error> {
    if arg == "auto" {
        Ok(RankMode::Auto(cap.min(8).max(1)))
    } else {
        let r: usize = arg
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rank '{arg}'")))?;
        if r == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        Ok(RankMode::Fixed(r))
    }
}

fn kind_name(kind: EnsembleKind) -> &'static str {
    match kind {
        EnsembleKind::Gaussian => "gaussian",
        EnsembleKind::Rademacher => "rademacher",
        EnsembleKind::CommonGaussian => "common-gaussian",
    }
}
