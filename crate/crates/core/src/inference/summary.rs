//! Posterior draw containers and summaries.

use super::diagnostics::ChainDiagnostics;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

/// Posterior draws pooled across chains, kept per-chain for diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// `chains[c][i]` is the unconstrained draw i of chain c.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub dim: usize,
}

impl PosteriorDraws {
    pub fn new(chains: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = chains
            .first()
            .and_then(|c| c.first())
            .map(|d| d.len())
            .ok_or_else(|| Error::domain("no draws"))?;
        if chains
            .iter()
            .flatten()
            .any(|d| d.len() != dim)
        {
            return Err(Error::domain("ragged draw matrix"));
        }
        Ok(PosteriorDraws { chains, dim })
    }

    pub fn n_total(&self) -> usize {
        self.chains.iter().map(|c| c.len()).sum()
    }

    /// Iterate over all draws in chain order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flatten().map(|d| d.as_slice())
    }

    pub fn diagnostics(&self, coord: usize) -> ChainDiagnostics {
        ChainDiagnostics::for_coordinate(&self.chains, coord)
    }

    /// Apply `f` to every draw, collecting a derived scalar chain per
    /// original chain (for diagnostics on transformed quantities).
    pub fn map_chains<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.iter().map(|d| f(d)).collect())
            .collect()
    }
}

/// Linear-interpolation quantile over a sample (type 7). The input need
/// not be sorted.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&q));
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Summary of one scalar quantity.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub median: f64,
    pub hi95: f64,
}

/// Summarize a pooled sample of a scalar quantity. Transformations
/// (exponentiation, aggregation) must be applied per draw before calling
/// this, so the interval is exact for the transformed quantity.
pub fn summarize_draws(values: &[f64]) -> SummaryRow {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SummaryRow {
        mean,
        sd: var.sqrt(),
        lo95: quantile_sorted(&sorted, 0.025),
        median: quantile_sorted(&sorted, 0.5),
        hi95: quantile_sorted(&sorted, 0.975),
    }
}

/// Extend a log-immigration series beyond its last fitted year by
/// sampling random-walk innovations from the fitted heavy-tailed step
/// distribution. Returns the `horizon` appended values for one draw.
pub fn project_random_walk(
    last: f64,
    sigma_step: f64,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let t = StudentT::new(10.0).expect("valid dof");
    let mut cur = last;
    (0..horizon)
        .map(|_| {
            cur += sigma_step * t.sample(rng);
            cur
        })
        .collect()
}
