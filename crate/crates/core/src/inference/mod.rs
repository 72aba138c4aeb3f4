//! Gradient-based posterior sampling: the No-U-Turn sampler with dual
//! averaging step-size adaptation and a dense Laplace mass matrix
//! (finite-difference Hessian, rebuilt at scheduled points during
//! warmup), plus convergence diagnostics and posterior summaries.
//! A windowed diagonal mass matrix is the fallback when the Hessian
//! is unusable.

mod diagnostics;
mod nuts;
mod summary;

pub use diagnostics::{effective_sample_size, split_rhat, ChainDiagnostics};
pub use nuts::{sample, ChainStats, LogDensity, SamplerConfig};
#[doc(hidden)]
pub use nuts::energy_scan;
pub use summary::{
    project_random_walk, quantile, summarize_draws, PosteriorDraws, SummaryRow,
};
