//! Convergence diagnostics: split potential scale reduction and
//! autocorrelation-based effective sample size.

/// Split each chain in half and compute the potential scale reduction
/// factor over the resulting half-chains. Values near 1 indicate the
/// chains agree; > 1.01 flags poor mixing.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    rhat(&halves)
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let mid = c.len() / 2;
        out.push(c[..mid].to_vec());
        out.push(c[mid..mid * 2].to_vec());
    }
    out
}

fn rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) as f64;
    if m < 2.0 || n < 2.0 {
        return f64::NAN;
    }
    let n_usize = n as usize;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c[..n_usize].iter().sum::<f64>() / n)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| {
            c[..n_usize].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        // Constant chains: identical constants converge trivially.
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Effective sample size across chains via Geyer's initial monotone
/// positive sequence on the pooled autocorrelation estimate.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    let m = halves.len();
    let n = halves.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves
        .iter()
        .map(|c| c[..n].iter().sum::<f64>() / n as f64)
        .collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0).max(1.0);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    // Chain-averaged autocovariances.
    let acov = |lag: usize| -> f64 {
        halves
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag)
                    .map(|t| (c[t] - mu) * (c[t + lag] - mu))
                    .sum::<f64>()
                    / n as f64
            })
            .sum::<f64>()
            / m as f64
    };

    let rho = |lag: usize| -> f64 { 1.0 - (w - acov(lag)) / var_plus };

    let mut sum_rho = 0.0;
    let mut lag = 1;
    let mut prev_pair = f64::INFINITY;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        // Enforce monotone decrease of successive pair sums.
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        sum_rho += pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    let tau = 1.0 + 2.0 * sum_rho;
    (total / tau).min(total)
}

/// Per-parameter convergence assessment.
#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    pub rhat: f64,
    pub ess: f64,
}

impl ChainDiagnostics {
    pub fn for_coordinate(draws: &[Vec<Vec<f64>>], coord: usize) -> Self {
        let chains: Vec<Vec<f64>> = draws
            .iter()
            .map(|c| c.iter().map(|d| d[coord]).collect())
            .collect();
        ChainDiagnostics {
            rhat: split_rhat(&chains),
            ess: effective_sample_size(&chains),
        }
    }
}
