//! Recovery of simultaneously low-rank and joint-sparse matrices from
//! per-frame compressed measurements.
//!
//! Each frame (column) of an N×T signal matrix is observed through its own
//! random linear map. When the columns share one sparse support and their
//! amplitudes live in a low-dimensional subspace, far fewer measurements
//! suffice than either structure alone would allow. The solver alternates
//! two approximate-message-passing phases — a per-frame linear phase and a
//! bilinear factorization phase — exchanging extrinsic Gaussian messages
//! and per-row support beliefs until the joint estimate settles, while EM
//! re-estimates sparsity rate, slab moments, and noise levels along the
//! way.
//!
//! Module map:
//! - [`priors`]: scalar Bernoulli-Gaussian kernels and support-message
//!   algebra shared by both phases.
//! - [`sensing`]: DCT basis, measurement ensembles, noisy acquisition,
//!   synthetic ground truth, cube ingestion.
//! - [`gamp`]: the per-frame linear solver.
//! - [`bigamp`]: the bilinear factorization solver and rank selection.
//! - [`turbo`]: the outer loop coupling the phases, plus EM.
//! - [`harness`]: metrics, ablation baselines, sweeps, file formats,
//!   plotting.
//!
//! The narrative guide in `book/` walks through the model and each phase;
//! its code snippets compile and run as doctests of this crate.

pub mod bigamp;
pub mod error;
pub mod gamp;
pub mod harness;
pub mod linalg;
pub mod priors;
pub mod sensing;
pub mod turbo;

pub use error::{Error, Result};
pub use priors::{BgPriorField, Hyperparams, SupportBeliefs};
pub use sensing::{CubeLayout, EnsembleKind, MeasurementSet, SignalEnsemble};
pub use turbo::{run_ls_amp, Reconstruction, TurboConfig};

/// Book chapters double as doctests so the guide can never drift from the
/// library (compiled only under `cargo test --doc`).
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signal-model.md")]
    mod signal_model {}
    #[doc = include_str!("../../../book/src/scalar-kernels.md")]
    mod scalar_kernels {}
    #[doc = include_str!("../../../book/src/frame-phase.md")]
    mod frame_phase {}
    #[doc = include_str!("../../../book/src/factorization.md")]
    mod factorization {}
    #[doc = include_str!("../../../book/src/turbo-loop.md")]
    mod turbo_loop {}
    #[doc = include_str!("../../../book/src/files-and-cli.md")]
    mod files_and_cli {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
