//! Supporting engineering around the solvers: metrics, ablation baselines,
//! experiment sweeps, file formats, and plotting.

pub mod baselines;
pub mod io;
pub mod metrics;
pub mod svg;
pub mod sweep;
