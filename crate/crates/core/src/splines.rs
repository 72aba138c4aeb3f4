//! Cubic B-spline design matrices (1-D and tensor-product 2-D), difference
//! penalties, and the small fixed-shape decay splines used for emigration
//! and undercount.

use crate::error::{Error, Result};

/// Spline order for a cubic basis (degree 3).
pub const CUBIC_ORDER: usize = 4;

/// How interior knots are placed over the evaluation span.
#[derive(Debug, Clone)]
pub enum KnotRule {
    /// Equally spaced interior knots.
    Uniform,
    /// Interior knots at equally spaced quantiles of a weighted histogram.
    /// `values` and `weights` describe the histogram; values outside the
    /// evaluation span are clamped to it.
    DataPercentile { values: Vec<f64>, weights: Vec<f64> },
}

/// A clamped cubic B-spline basis evaluated on a fixed set of points.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    /// Row-major design matrix, `points.len()` x `n_basis`.
    pub design: Vec<f64>,
    /// Full clamped knot vector (length `n_basis + order`).
    pub knots: Vec<f64>,
    pub n_basis: usize,
    pub order: usize,
    /// Points the design matrix was evaluated on.
    pub points: Vec<f64>,
    /// Per-row sparse form: first nonzero column plus `order` values.
    rows: Vec<(usize, [f64; CUBIC_ORDER])>,
}

impl SplineBasis {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.design[row * self.n_basis + col]
    }

    /// The (start column, nonzero values) form of one design row.
    pub fn sparse_row(&self, row: usize) -> (usize, &[f64; CUBIC_ORDER]) {
        let (s, ref v) = self.rows[row];
        (s, v)
    }

    /// Dense curve values `design * coef`.
    pub fn evaluate(&self, coef: &[f64]) -> Result<Vec<f64>> {
        if coef.len() != self.n_basis {
            return Err(Error::domain(format!(
                "coefficient length {} != basis size {}",
                coef.len(),
                self.n_basis
            )));
        }
        Ok((0..self.n_points())
            .map(|r| {
                let (s, v) = self.sparse_row(r);
                v.iter()
                    .enumerate()
                    .map(|(k, &b)| b * coef[s + k])
                    .sum::<f64>()
            })
            .collect())
    }
}

/// Build a clamped cubic B-spline design matrix over `points`.
///
/// The knot span is `[min(points), max(points)]`; interior knots follow
/// `knot_rule`.
pub fn build_basis(points: &[f64], n_basis: usize, knot_rule: &KnotRule) -> Result<SplineBasis> {
    if n_basis < CUBIC_ORDER {
        return Err(Error::domain(format!(
            "n_basis {n_basis} must be at least {CUBIC_ORDER} for a cubic basis"
        )));
    }
    if points.is_empty() {
        return Err(Error::domain("no evaluation points supplied"));
    }
    let lo = points.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::domain("evaluation points must span a finite interval"));
    }
    let knots = knot_vector(lo, hi, n_basis, knot_rule)?;
    basis_from_knots(points, n_basis, knots)
}

fn knot_vector(lo: f64, hi: f64, n_basis: usize, rule: &KnotRule) -> Result<Vec<f64>> {
    let n_interior = n_basis - CUBIC_ORDER;
    let mut interior = match rule {
        KnotRule::Uniform => (1..=n_interior)
            .map(|k| lo + (hi - lo) * k as f64 / (n_interior + 1) as f64)
            .collect::<Vec<_>>(),
        KnotRule::DataPercentile { values, weights } => {
            weighted_quantile_knots(values, weights, lo, hi, n_interior)?
        }
    };
    // Guard against coincident knots from degenerate weight histograms.
    let min_gap = (hi - lo) * 1e-9;
    for i in 1..interior.len() {
        if interior[i] <= interior[i - 1] + min_gap {
            interior[i] = interior[i - 1] + min_gap;
        }
    }
    let mut knots = Vec::with_capacity(n_basis + CUBIC_ORDER);
    knots.extend(std::iter::repeat(lo).take(CUBIC_ORDER));
    knots.extend(interior);
    knots.extend(std::iter::repeat(hi).take(CUBIC_ORDER));
    Ok(knots)
}

fn weighted_quantile_knots(
    values: &[f64],
    weights: &[f64],
    lo: f64,
    hi: f64,
    n_interior: usize,
) -> Result<Vec<f64>> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::domain(
            "percentile knot rule needs matching nonempty values and weights",
        ));
    }
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| (v.clamp(lo, hi), w.max(0.0)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        // No information in the weights: fall back to uniform placement.
        return Ok((1..=n_interior)
            .map(|k| lo + (hi - lo) * k as f64 / (n_interior + 1) as f64)
            .collect());
    }
    let mut out = Vec::with_capacity(n_interior);
    let mut cum = 0.0;
    let mut idx = 0;
    for k in 1..=n_interior {
        let target = total * k as f64 / (n_interior + 1) as f64;
        while idx < pairs.len() && cum + pairs[idx].1 < target {
            cum += pairs[idx].1;
            idx += 1;
        }
        out.push(if idx < pairs.len() { pairs[idx].0 } else { hi });
    }
    Ok(out)
}

fn basis_from_knots(points: &[f64], n_basis: usize, knots: Vec<f64>) -> Result<SplineBasis> {
    let p = CUBIC_ORDER - 1;
    let lo = knots[p];
    let hi = knots[n_basis];
    let mut design = vec![0.0; points.len() * n_basis];
    let mut rows = Vec::with_capacity(points.len());
    for (r, &u) in points.iter().enumerate() {
        if u < lo - 1e-12 || u > hi + 1e-12 {
            return Err(Error::domain(format!(
                "evaluation point {u} outside knot span [{lo}, {hi}]"
            )));
        }
        let u = u.clamp(lo, hi);
        let span = find_span(&knots, n_basis, u);
        let vals = basis_funs(&knots, span, u);
        let start = span - p;
        let mut arr = [0.0; CUBIC_ORDER];
        for k in 0..CUBIC_ORDER {
            design[r * n_basis + start + k] = vals[k];
            arr[k] = vals[k];
        }
        rows.push((start, arr));
    }
    Ok(SplineBasis {
        design,
        knots,
        n_basis,
        order: CUBIC_ORDER,
        points: points.to_vec(),
        rows,
    })
}

/// Knot span index such that `knots[span] <= u < knots[span+1]`, with the
/// last span closed on the right.
fn find_span(knots: &[f64], n_basis: usize, u: f64) -> usize {
    let p = CUBIC_ORDER - 1;
    if u >= knots[n_basis] {
        return n_basis - 1;
    }
    let mut lo = p;
    let mut hi = n_basis;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if u < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `order` nonzero basis values at `u` (Cox-de Boor, local form).
fn basis_funs(knots: &[f64], span: usize, u: f64) -> [f64; CUBIC_ORDER] {
    let p = CUBIC_ORDER - 1;
    let mut n = [0.0; CUBIC_ORDER];
    let mut left = [0.0; CUBIC_ORDER];
    let mut right = [0.0; CUBIC_ORDER];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// Difference operator on spline coefficients, used as a penalty.
#[derive(Debug, Clone)]
pub struct DifferencePenalty {
    pub order: usize,
    /// Row-major (n - order) x n operator matrix.
    pub operator: Vec<f64>,
    pub n: usize,
}

impl DifferencePenalty {
    pub fn new(order: usize, n: usize) -> Result<Self> {
        if !(order == 1 || order == 2) {
            return Err(Error::domain("difference penalty order must be 1 or 2"));
        }
        if n <= order {
            return Err(Error::domain(format!(
                "need more than {order} coefficients for an order-{order} penalty"
            )));
        }
        let rows = n - order;
        let mut operator = vec![0.0; rows * n];
        for r in 0..rows {
            match order {
                1 => {
                    operator[r * n + r] = -1.0;
                    operator[r * n + r + 1] = 1.0;
                }
                _ => {
                    operator[r * n + r] = -1.0;
                    operator[r * n + r + 1] = 2.0;
                    operator[r * n + r + 2] = -1.0;
                }
            }
        }
        Ok(DifferencePenalty { order, operator, n })
    }

    pub fn apply(&self, coef: &[f64]) -> Result<Vec<f64>> {
        if coef.len() != self.n {
            return Err(Error::domain("coefficient length mismatch for penalty"));
        }
        let rows = self.n - self.order;
        Ok((0..rows)
            .map(|r| {
                (0..self.n)
                    .map(|c| self.operator[r * self.n + c] * coef[c])
                    .sum()
            })
            .collect())
    }
}

/// `out[t] = 2 c[t] - c[t-1] - c[t+1]` for interior `t`.
pub fn second_difference(coef: &[f64]) -> Result<Vec<f64>> {
    if coef.len() < 3 {
        return Err(Error::domain(
            "second difference needs at least 3 coefficients",
        ));
    }
    Ok((1..coef.len() - 1)
        .map(|t| 2.0 * coef[t] - coef[t - 1] - coef[t + 1])
        .collect())
}

/// `M_a * coef * M_b'` evaluated on both bases' point sets.
/// Returns a row-major `points_a x points_b` matrix.
pub fn tensor_surface(
    basis_a: &SplineBasis,
    basis_b: &SplineBasis,
    coef: &[f64],
) -> Result<Vec<f64>> {
    if coef.len() != basis_a.n_basis * basis_b.n_basis {
        return Err(Error::domain(format!(
            "coefficient matrix must be {} x {}",
            basis_a.n_basis, basis_b.n_basis
        )));
    }
    let nb = basis_b.n_basis;
    let (pa, pb) = (basis_a.n_points(), basis_b.n_points());
    // stage 1: U = M_a * coef  (pa x nb), exploiting row sparsity of M_a
    let mut u = vec![0.0; pa * nb];
    for r in 0..pa {
        let (s, v) = basis_a.sparse_row(r);
        for j in 0..nb {
            let mut acc = 0.0;
            for k in 0..CUBIC_ORDER {
                acc += v[k] * coef[(s + k) * nb + j];
            }
            u[r * nb + j] = acc;
        }
    }
    // stage 2: out = U * M_b'
    let mut out = vec![0.0; pa * pb];
    for q in 0..pb {
        let (s, v) = basis_b.sparse_row(q);
        for r in 0..pa {
            let mut acc = 0.0;
            for k in 0..CUBIC_ORDER {
                acc += u[r * nb + s + k] * v[k];
            }
            out[r * pb + q] = acc;
        }
    }
    Ok(out)
}

/// Cubic basis over years-since-entry 1..=horizon used for the emigration
/// and undercount decay curves. With `tie_last_two` the caller holds the
/// last two coefficients equal, which gives the fitted curve zero slope
/// approaching `horizon`; values past `horizon` are held at the
/// `horizon` value by the caller.
pub fn build_decay_spline(horizon: usize, n_basis: usize, tie_last_two: bool) -> Result<SplineBasis> {
    if horizon < n_basis {
        return Err(Error::domain(format!(
            "decay spline horizon {horizon} must be at least n_basis {n_basis}"
        )));
    }
    let _ = tie_last_two; // the tie lives in the coefficients, not the basis
    let points: Vec<f64> = (1..=horizon).map(|y| y as f64).collect();
    build_basis(&points, n_basis, &KnotRule::Uniform)
}
