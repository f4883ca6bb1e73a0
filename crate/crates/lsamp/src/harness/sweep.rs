//! Experiment sweeps: CNMSE versus compression ratio over seeded ensembles.
//!
//! Every grid point is an independent job with a deterministic seed derived
//! from the master seed and the point's (ratio, seed) indices — never from
//! the algorithm or ensemble kind, so algorithm comparisons are paired and
//! Gaussian/±1 ensembles see identical signals. Jobs run on a worker pool;
//! a single collector writes CSV rows in job order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::baselines::{baseline_independent, baseline_jointsparse};
use crate::harness::metrics::{cnmse_db, cnmse_detailed, support_metrics};
use crate::harness::svg::{line_chart, Series};
use crate::priors::Hyperparams;
use crate::sensing::{acquire_signal, dct_basis, derive_seed, gen_ls_signal, EnsembleKind};
use crate::turbo::{run_ls_amp, TurboConfig};

/// Which reconstruction algorithm a sweep row used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    LsAmp,
    Independent,
    JointSparse,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::LsAmp => "lsamp",
            Algorithm::Independent => "independent",
            Algorithm::JointSparse => "jointsparse",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsamp" => Ok(Algorithm::LsAmp),
            "independent" => Ok(Algorithm::Independent),
            "jointsparse" => Ok(Algorithm::JointSparse),
            other => Err(Error::invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Sweep definition; maps one-to-one onto the JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Compression ratios M/N to evaluate.
    pub ratios: Vec<f64>,
    pub seeds_per_point: u64,
    pub ensemble: EnsembleKind,
    pub snr_db: f64,
    pub n: usize,
    pub t: usize,
    pub r: usize,
    pub k: usize,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub master_seed: u64,
    /// Record wall-clock runtimes. Disable for byte-reproducible output.
    #[serde(default = "default_true")]
    pub record_runtime: bool,
    #[serde(default)]
    pub turbo: TurboConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("ratios must lie in (0, 1]".into()));
        }
        if self.seeds_per_point == 0 {
            return Err(Error::Config("seeds_per_point must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm required".into()));
        }
        if self.n == 0 || self.t == 0 || self.k == 0 || self.k > self.n {
            return Err(Error::Config("need 0 < K ≤ N and T ≥ 1".into()));
        }
        if self.r == 0 || self.r > self.k.min(self.t) {
            return Err(Error::Config("need 1 ≤ R ≤ min(K, T)".into()));
        }
        self.turbo.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// One CSV row of a completed sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub cnmse_db: f64,
    pub f1: f64,
    pub rank: usize,
    pub runtime_s: f64,
    pub zero_cols: usize,
}

pub const CSV_HEADER: &str = "ratio,seed,algorithm,cnmse_db,f1,rank,runtime_s,zero_cols";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{},{:.6},{}",
            self.ratio,
            self.seed,
            self.algorithm.name(),
            self.cnmse_db,
            self.f1,
            self.rank,
            self.runtime_s,
            self.zero_cols
        )
    }
}

/// Completed sweep: the rows plus where they were written.
#[derive(Debug)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Runs every (ratio × seed × algorithm) job and writes `results.csv` and
/// `cnmse_vs_ratio.svg` into `out_dir`.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;

    struct Job {
        ratio: f64,
        ratio_idx: usize,
        seed_idx: u64,
        algorithm: Algorithm,
    }
    let mut jobs = Vec::new();
    for (ratio_idx, &ratio) in spec.ratios.iter().enumerate() {
        for seed_idx in 0..spec.seeds_per_point {
            for &algorithm in &spec.algorithms {
                jobs.push(Job {
                    ratio,
                    ratio_idx,
                    seed_idx,
                    algorithm,
                });
            }
        }
    }

    let basis = dct_basis(spec.n)?;
    let gen_hyper = Hyperparams::new(
        spec.k as f64 / spec.n as f64,
        0.0,
        1.0,
        vec![1.0; spec.t],
        spec.r,
    )?;

    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|job| -> Result<SweepRow> {
            // Seeds depend only on the grid point, so algorithms (and
            // ensemble kinds across sweeps) are compared on paired data.
            let point = job.ratio_idx as u64 * spec.seeds_per_point + job.seed_idx;
            let signal = gen_ls_signal(
                spec.n,
                spec.t,
                spec.r,
                spec.k,
                &gen_hyper,
                derive_seed(spec.master_seed, "signal", point),
            )?;
            let m = ((job.ratio * spec.n as f64).round() as usize).max(1);
            let meas = acquire_signal(
                &signal.x,
                m,
                spec.ensemble,
                spec.snr_db,
                derive_seed(spec.master_seed, "acquire", point),
            )?;
            let mut config = spec.turbo.clone();
            config.master_seed = derive_seed(spec.master_seed, "turbo", point);

            let start = Instant::now();
            let rec = match job.algorithm {
                Algorithm::LsAmp => run_ls_amp(&meas, &basis, &config)?,
                Algorithm::Independent => baseline_independent(&meas, &basis, &config)?,
                Algorithm::JointSparse => baseline_jointsparse(&meas, &basis, &config)?,
            };
            let runtime_s = if spec.record_runtime {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let (value, zero_cols) = cnmse_detailed(&signal.x, &rec.x_hat)?;
            let (_, _, f1) = support_metrics(&signal.support, &rec.support_row, 0.5)?;
            Ok(SweepRow {
                ratio: job.ratio,
                seed: job.seed_idx,
                algorithm: job.algorithm,
                cnmse_db: cnmse_db(value),
                f1,
                rank: rec.rank.unwrap_or(0),
                runtime_s,
                zero_cols,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let csv_path = out_dir.join("results.csv");
    let mut csv = String::with_capacity(rows.len() * 64);
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;

    let svg_path = out_dir.join("cnmse_vs_ratio.svg");
    let series: Vec<Series> = spec
        .algorithms
        .iter()
        .map(|&algo| Series {
            label: algo.name().to_string(),
            points: spec
                .ratios
                .iter()
                .map(|&ratio| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.algorithm == algo && r.ratio == ratio)
                        .map(|r| r.cnmse_db)
                        .collect();
                    (ratio, median(vals))
                })
                .collect(),
        })
        .collect();
    line_chart(
        &svg_path,
        "median CNMSE vs compression ratio",
        "M/N",
        "CNMSE (dB)",
        &series,
    )?;

    Ok(SweepSummary {
        rows,
        csv_path,
        svg_path,
    })
}

/// Median of a sample; the mean of the middle pair for even sizes.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec() -> SweepSpec {
        SweepSpec {
            ratios: vec![0.4, 0.6],
            seeds_per_point: 2,
            ensemble: EnsembleKind::Gaussian,
            snr_db: 25.0,
            n: 24,
            t: 6,
            r: 2,
            k: 6,
            algorithms: vec![Algorithm::LsAmp, Algorithm::Independent],
            master_seed: 7,
            record_runtime: false,
            turbo: TurboConfig {
                max_outer_iters: 6,
                rank_mode: crate::turbo::RankMode::Fixed(2),
                ..TurboConfig::default()
            },
        }
    }

    #[test]
    fn sweep_writes_expected_row_count_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec();
        let s1 = run_sweep(&spec, &dir.path().join("a")).unwrap();
        assert_eq!(s1.rows.len(), 2 * 2 * 2);
        let csv1 = std::fs::read(&s1.csv_path).unwrap();
        let lines = csv1.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        assert_eq!(lines, 1 + 8);
        let s2 = run_sweep(&spec, &dir.path().join("b")).unwrap();
        assert_eq!(csv1, std::fs::read(&s2.csv_path).unwrap());
        assert_eq!(
            std::fs::read(&s1.svg_path).unwrap(),
            std::fs::read(&s2.svg_path).unwrap()
        );
    }

    #[test]
    fn rows_parse_back_to_spec_points() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec();
        let summary = run_sweep(&spec, dir.path()).unwrap();
        let text = std::fs::read_to_string(&summary.csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 8);
            let ratio: f64 = fields[0].parse().unwrap();
            assert!(spec.ratios.contains(&ratio));
            let seed: u64 = fields[1].parse().unwrap();
            assert!(seed < spec.seeds_per_point);
            let algo: Algorithm = fields[2].parse().unwrap();
            assert!(spec.algorithms.contains(&algo));
            let _: f64 = fields[3].parse().unwrap();
        }
    }

    #[test]
    fn spec_validation_rejects_bad_grids() {
        let mut spec = tiny_spec();
        spec.ratios = vec![0.0];
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.seeds_per_point = 0;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.k = 100;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
