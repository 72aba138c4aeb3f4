//! Priors, the two-part survey likelihood, and the differentiable
//! log-posterior over the unconstrained parameter vector.

use crate::cohort::{
    model_state, ModelInputs, Params, ParameterSet, N_AGE_BASIS, N_MORT_BASIS, N_YOE_BASIS,
    N_ZETA_AGE10, N_ZETA_AGE5, N_ZETA_YOE10, N_ZETA_YOE5,
};
use crate::error::{Error, Result};
use crate::observation::{decay_curve, l_at, Observation, CalibrationTargets, Region, ZETA_MAX};
use crate::strata::StrataGrid;
use crate::tape::{Real, Tape, Var};

pub const LN_2PI: f64 = 1.837_877_066_409_345_4;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = 0.999_999_999_999_809_93;
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate() {
        a += c / (x + (i as f64) + 1.0);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// ---------------------------------------------------------------------
// Generic log-density building blocks. All are full densities (constants
// included) so f64 evaluations are comparable across datasets.

fn normal<T: Real>(x: T, mean: f64, sd: f64) -> T {
    x.subf(mean)
        .mulf(1.0 / sd)
        .sq()
        .mulf(-0.5)
        .addf(-0.5 * LN_2PI - sd.ln())
}

/// Normal(0, sd) with an estimated scale.
fn normal0_sd<T: Real>(x: T, sd: T) -> T {
    (x / sd).sq().mulf(-0.5).addf(-0.5 * LN_2PI) - sd.ln()
}

/// Student t(nu, 0, sd) with an estimated scale.
fn student_t0<T: Real>(x: T, nu: f64, sd: T) -> T {
    let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (x / sd)
        .sq()
        .mulf(1.0 / nu)
        .addf(1.0)
        .ln()
        .mulf(-(nu + 1.0) / 2.0)
        .addf(c)
        - sd.ln()
}

fn half_cauchy<T: Real>(x: T, scale: f64) -> T {
    x.mulf(1.0 / scale)
        .sq()
        .addf(1.0)
        .ln()
        .fsub((2.0 / (std::f64::consts::PI * scale)).ln())
}

/// Gamma(shape, rate).
fn gamma_lpdf<T: Real>(x: T, shape: f64, rate: f64) -> T {
    let c = shape * rate.ln() - ln_gamma(shape);
    x.ln().mulf(shape - 1.0).addf(c) - x.mulf(rate)
}

/// HalfNormal(0, sd) with an estimated scale (x >= 0).
fn half_normal<T: Real>(x: T, sd: T) -> T {
    (x / sd)
        .sq()
        .mulf(-0.5)
        .addf(0.5 * (2.0 / std::f64::consts::PI).ln())
        - sd.ln()
}

// ---------------------------------------------------------------------

/// Observed survey aggregates aligned with the strata grid.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    /// Weighted population estimate per stratum (full grid length;
    /// projection-year strata are zero).
    pub y: Vec<f64>,
    /// Inverse mean analysis weight per stratum; empty strata carry the
    /// survey-year mean.
    pub o: Vec<f64>,
    /// Survey standard error per stratum, for validation diagnostics.
    pub se: Option<Vec<f64>>,
    /// Respondent count per survey year.
    pub sample_size: Vec<f64>,
    pub region: Region,
}

impl SurveyDataset {
    /// `o` entries may be zero/NaN for empty strata; they are replaced by
    /// the survey-year mean of the observed values.
    pub fn new(
        grid: &StrataGrid,
        y: Vec<f64>,
        mut o: Vec<f64>,
        sample_size: Vec<f64>,
        region: Region,
    ) -> Result<Self> {
        if y.len() != grid.len() || o.len() != grid.len() {
            return Err(Error::data("y/o length does not match the grid"));
        }
        if sample_size.len() != grid.survey_years().len() {
            return Err(Error::data("one sample size per survey year required"));
        }
        if sample_size.iter().any(|&n| !(n > 0.0)) {
            return Err(Error::data("sample sizes must be positive"));
        }
        for &svy in grid.survey_years() {
            let range = grid.year_range(svy).unwrap();
            let mut sum = 0.0;
            let mut count = 0usize;
            for off in range.clone() {
                if y[off] < 0.0 || !y[off].is_finite() {
                    return Err(Error::data(format!("negative or non-finite y at {off}")));
                }
                if y[off] > 0.0 {
                    if !(o[off] > 0.0) || !o[off].is_finite() {
                        return Err(Error::data(format!(
                            "observed stratum {off} needs a positive inverse mean weight"
                        )));
                    }
                    sum += o[off];
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { 1.0 };
            for off in range {
                if y[off] == 0.0 && !(o[off] > 0.0 && o[off].is_finite()) {
                    o[off] = mean;
                }
            }
        }
        Ok(SurveyDataset {
            y,
            o,
            se: None,
            sample_size,
            region,
        })
    }

    /// Prior means for the survey-year undercount terms: proportional to
    /// the inverse square root of the sample size on the log scale.
    pub fn mu_kappa(&self, scale: f64) -> Vec<f64> {
        self.sample_size
            .iter()
            .map(|&n| scale / n.sqrt())
            .collect()
    }
}

// ---------------------------------------------------------------------

/// Flattened unconstrained parameterization: identity for location
/// parameters, log for positive scales, scaled logit for the heap box.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_yoe: usize,
    pub n_svy: usize,
}

const N_ZETA: usize = N_ZETA_YOE10 + N_ZETA_YOE5 + N_ZETA_AGE10 + N_ZETA_AGE5;

impl ParamLayout {
    pub fn for_inputs(inputs: &ModelInputs) -> Self {
        ParamLayout {
            n_yoe: inputs.entry_years.len(),
            n_svy: inputs.grid.survey_years().len(),
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.n_yoe          // alpha0, alpha
            + 2                 // sigma_alpha1, sigma_alpha2
            + N_AGE_BASIS + 1   // gamma, sigma_gamma2
            + N_AGE_BASIS * N_YOE_BASIS + 1 // tau, sigma_tau
            + N_MORT_BASIS + 1  // delta, sigma_delta2
            + 1                 // theta
            + 3                 // eta
            + N_YOE_BASIS + 1   // rho, sigma_rho2
            + N_ZETA + 2        // zeta blocks and their scales
            + self.n_svy        // kappa
            + 3                 // phi
            + 2 // lambda, sigma_y
    }

    /// Map constrained parameters to the unconstrained vector.
    pub fn unconstrain(&self, p: &ParameterSet) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.dim());
        let logit_box = |z: f64| -> Result<f64> {
            if !(0.0..ZETA_MAX).contains(&z) || z == 0.0 {
                return Err(Error::domain(format!(
                    "heap fraction {z} not interior to (0, {ZETA_MAX})"
                )));
            }
            Ok(z.ln() - (ZETA_MAX - z).ln())
        };
        let pos = |v: f64, name: &str| -> Result<f64> {
            if v <= 0.0 {
                return Err(Error::domain(format!("{name} must be positive")));
            }
            Ok(v.ln())
        };
        x.push(p.alpha0);
        x.extend(&p.alpha);
        x.push(pos(p.sigma_alpha1, "sigma_alpha1")?);
        x.push(pos(p.sigma_alpha2, "sigma_alpha2")?);
        x.extend(second_diff_whiten(&p.gamma, p.sigma_gamma2));
        x.push(pos(p.sigma_gamma2, "sigma_gamma2")?);
        let log_sigma_tau = pos(p.sigma_tau, "sigma_tau")?;
        // Non-centered surface block: store tau / sigma_tau.
        x.extend(p.tau.iter().map(|t| t / p.sigma_tau));
        x.push(log_sigma_tau);
        x.extend(second_diff_whiten(&p.delta, p.sigma_delta2));
        x.push(pos(p.sigma_delta2, "sigma_delta2")?);
        x.push(p.theta);
        x.extend(&p.eta);
        x.extend(second_diff_whiten(&p.rho, p.sigma_rho2));
        x.push(pos(p.sigma_rho2, "sigma_rho2")?);
        for z in p
            .zeta_yoe10
            .iter()
            .chain(&p.zeta_yoe5)
            .chain(&p.zeta_age10)
            .chain(&p.zeta_age5)
        {
            x.push(logit_box(*z)?);
        }
        x.push(pos(p.sigma_zeta_yoe, "sigma_zeta_yoe")?);
        x.push(pos(p.sigma_zeta_age, "sigma_zeta_age")?);
        x.extend(&p.kappa);
        x.extend(&p.phi);
        x.push(pos(p.lambda, "lambda")?);
        x.push(pos(p.sigma_y, "sigma_y")?);
        debug_assert_eq!(x.len(), self.dim());
        Ok(x)
    }

    /// Map the unconstrained vector to constrained parameters, returning
    /// the log-Jacobian of the transform as the second value.
    pub fn constrain<T: Real>(&self, x: &[T]) -> Result<(Params<T>, T)> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!(
                "parameter vector length {} != {}",
                x.len(),
                self.dim()
            )));
        }
        let mut log_jac = x[0].lift(0.0);
        let mut cur = 0usize;
        let mut take = |n: usize| -> std::ops::Range<usize> {
            let r = cur..cur + n;
            cur += n;
            r
        };
        let scalar_pos = |u: T, log_jac: &mut T| -> T {
            *log_jac = *log_jac + u;
            u.exp()
        };
        let alpha0 = x[take(1).start];
        let alpha = x[take(self.n_yoe)].to_vec();
        let sigma_alpha1 = scalar_pos(x[take(1).start], &mut log_jac);
        let sigma_alpha2 = scalar_pos(x[take(1).start], &mut log_jac);
        // Penalized spline blocks are sampled in whitened second-difference
        // coordinates: the first two values are kept, and each later
        // coordinate is the second difference divided by the penalty
        // scale (standard normal under the prior). The Jacobian
        // contribution (n-2)·ln(sigma) cancels the penalty's
        // normalization, which removes the scale funnel.
        let gamma_raw = x[take(N_AGE_BASIS)].to_vec();
        let sigma_gamma2 = scalar_pos(x[take(1).start], &mut log_jac);
        let gamma = second_diff_color(&gamma_raw, sigma_gamma2, &mut log_jac);
        // The surface coefficients are sampled non-centered: the
        // unconstrained coordinates are tau / sigma_tau (standard normal
        // under the prior), which removes the scale funnel when the
        // surface is prior-dominated. The prior term matches (it is a
        // standard normal on the sampled coordinates), so no Jacobian
        // contribution arises here.
        let tau_white = x[take(N_AGE_BASIS * N_YOE_BASIS)].to_vec();
        let sigma_tau = scalar_pos(x[take(1).start], &mut log_jac);
        let tau: Vec<T> = tau_white.into_iter().map(|u| u * sigma_tau).collect();
        let delta_raw = x[take(N_MORT_BASIS)].to_vec();
        let sigma_delta2 = scalar_pos(x[take(1).start], &mut log_jac);
        let delta = second_diff_color(&delta_raw, sigma_delta2, &mut log_jac);
        let theta = x[take(1).start];
        let eta = x[take(3)].to_vec();
        let rho_raw = x[take(N_YOE_BASIS)].to_vec();
        let sigma_rho2 = scalar_pos(x[take(1).start], &mut log_jac);
        let rho = second_diff_color(&rho_raw, sigma_rho2, &mut log_jac);
        let boxed = |u: T, log_jac: &mut T| -> T {
            // z = ZETA_MAX * sigmoid(u); d z / d u = z (1 - 4 z).
            let s = (-u).exp().addf(1.0).fdiv(1.0);
            let z = s.mulf(ZETA_MAX);
            *log_jac = *log_jac + z.ln() + z.mulf(-1.0 / ZETA_MAX).addf(1.0).ln();
            z
        };
        let zeta_yoe10: Vec<T> = x[take(N_ZETA_YOE10)]
            .to_vec()
            .into_iter()
            .map(|u| boxed(u, &mut log_jac))
            .collect();
        let zeta_yoe5: Vec<T> = x[take(N_ZETA_YOE5)]
            .to_vec()
            .into_iter()
            .map(|u| boxed(u, &mut log_jac))
            .collect();
        let zeta_age10: Vec<T> = x[take(N_ZETA_AGE10)]
            .to_vec()
            .into_iter()
            .map(|u| boxed(u, &mut log_jac))
            .collect();
        let zeta_age5: Vec<T> = x[take(N_ZETA_AGE5)]
            .to_vec()
            .into_iter()
            .map(|u| boxed(u, &mut log_jac))
            .collect();
        let sigma_zeta_yoe = scalar_pos(x[take(1).start], &mut log_jac);
        let sigma_zeta_age = scalar_pos(x[take(1).start], &mut log_jac);
        let kappa = x[take(self.n_svy)].to_vec();
        let phi = x[take(3)].to_vec();
        let lambda = scalar_pos(x[take(1).start], &mut log_jac);
        let sigma_y = scalar_pos(x[take(1).start], &mut log_jac);
        debug_assert_eq!(cur, self.dim());
        Ok((
            Params {
                alpha0,
                alpha,
                sigma_alpha1,
                sigma_alpha2,
                gamma,
                sigma_gamma2,
                tau,
                sigma_tau,
                delta,
                sigma_delta2,
                theta,
                eta,
                rho,
                sigma_rho2,
                zeta_yoe10,
                zeta_yoe5,
                zeta_age10,
                zeta_age5,
                sigma_zeta_yoe,
                sigma_zeta_age,
                kappa,
                phi,
                lambda,
                sigma_y,
            },
            log_jac,
        ))
    }
}

/// Reconstruct a penalized spline from whitened second-difference
/// coordinates: `raw[0..2]` are the first two values, `raw[k]` for k >= 2
/// is the (negated) second difference divided by `sigma`. Accumulates the
/// log-Jacobian `(n - 2) * ln(sigma)` of the linear map.
fn second_diff_color<T: Real>(raw: &[T], sigma: T, log_jac: &mut T) -> Vec<T> {
    let mut v = raw.to_vec();
    for k in 2..v.len() {
        v[k] = v[k - 1] + v[k - 1] - v[k - 2] + sigma * raw[k];
    }
    if v.len() > 2 {
        *log_jac = *log_jac + sigma.ln().mulf((v.len() - 2) as f64);
    }
    v
}

/// Inverse of [`second_diff_color`]: whiten a spline's second differences.
fn second_diff_whiten(vals: &[f64], sigma: f64) -> Vec<f64> {
    let mut out = vals.to_vec();
    for k in 2..vals.len() {
        out[k] = (vals[k] - 2.0 * vals[k - 1] + vals[k - 2]) / sigma;
    }
    out
}

// ---------------------------------------------------------------------

/// Sum of all prior log densities. `d_norm` is the derived age-profile
/// normalizer per entry year and `mu_kappa` the per-survey-year prior
/// means of the undercount terms.
fn log_prior_generic<T: Real>(params: &Params<T>, d_norm: &[T], mu_kappa: &[f64]) -> T {
    let mut lp = params.alpha0.lift(0.0);

    // Initial stock and immigration random walk with curvature damping.
    lp = lp + normal(params.alpha0, 0.0, 10.0);
    for &a in &params.alpha {
        lp = lp + normal(a, 0.0, 10.0);
    }
    for w in params.alpha.windows(2) {
        lp = lp + student_t0(w[1] - w[0], 10.0, params.sigma_alpha1);
    }
    for w in params.alpha.windows(3) {
        lp = lp + student_t0(w[1] + w[1] - w[0] - w[2], 10.0, params.sigma_alpha2);
    }
    lp = lp + half_cauchy(params.sigma_alpha1, 10.0) + half_cauchy(params.sigma_alpha2, 10.0);

    // Age-of-entry spline with second-difference smoothing.
    for &g in &params.gamma {
        lp = lp + normal(g, 0.0, 10.0);
    }
    for w in params.gamma.windows(3) {
        lp = lp + normal0_sd(w[1] + w[1] - w[0] - w[2], params.sigma_gamma2);
    }
    lp = lp + half_cauchy(params.sigma_gamma2, 10.0);

    // Temporal deviation surface (non-centered: standard normal on the
    // whitened coordinates tau / sigma_tau).
    for &t in &params.tau {
        lp = lp + normal(t / params.sigma_tau, 0.0, 1.0);
    }
    lp = lp + half_cauchy(params.sigma_tau, 1.0);

    // Identification prior on the derived normalizers.
    for &d in d_norm {
        lp = lp + gamma_lpdf(d, 2.0, 1.0);
    }

    // Mortality deviations and trend.
    for &d in &params.delta {
        lp = lp + normal(d, 0.0, 0.25);
    }
    for w in params.delta.windows(3) {
        lp = lp + normal0_sd(w[1] + w[1] - w[0] - w[2], params.sigma_delta2);
    }
    lp = lp + half_cauchy(params.sigma_delta2, 10.0);
    lp = lp + normal(params.theta, -0.013, 0.0025);

    // Emigration decay.
    lp = lp + normal(params.eta[0], 0.10f64.ln(), 0.5);
    lp = lp + normal(params.eta[1], 0.02f64.ln(), 0.5);
    lp = lp + normal(params.eta[2], 0.0025f64.ln(), 0.5);

    // Top-age adjustment.
    for &r in &params.rho {
        lp = lp + normal(r, 1.38, 0.25);
    }
    for w in params.rho.windows(3) {
        lp = lp + normal0_sd(w[1] + w[1] - w[0] - w[2], params.sigma_rho2);
    }
    lp = lp + half_cauchy(params.sigma_rho2, 10.0);

    // Heap fractions (half-normals over the [0, 0.25] box).
    for &z in params.zeta_yoe10.iter().chain(&params.zeta_yoe5) {
        lp = lp + half_normal(z, params.sigma_zeta_yoe);
    }
    for &z in params.zeta_age10.iter().chain(&params.zeta_age5) {
        lp = lp + half_normal(z, params.sigma_zeta_age);
    }
    lp = lp + half_cauchy(params.sigma_zeta_yoe, 0.05) + half_cauchy(params.sigma_zeta_age, 0.05);

    // Undercount terms and decay.
    for (i, &k) in params.kappa.iter().enumerate() {
        lp = lp + normal(k, mu_kappa[i], 0.5);
    }
    lp = lp + normal(params.phi[0], 0.10f64.ln(), 0.5);
    lp = lp + normal(params.phi[1], 0.025f64.ln(), 0.5);
    lp = lp + normal(params.phi[2], 0.005f64.ln(), 0.5);

    // Observation-rate adjustment and noise scale.
    lp = lp + gamma_lpdf(params.lambda, 5.0, 5.0);
    lp = lp + half_cauchy(params.sigma_y, 1000.0);
    lp
}

/// f64 prior evaluation; returns negative infinity outside the support.
pub fn log_prior(params: &ParameterSet, inputs: &ModelInputs, mu_kappa: &[f64]) -> Result<f64> {
    let in_support = params.sigma_alpha1 > 0.0
        && params.sigma_alpha2 > 0.0
        && params.sigma_gamma2 > 0.0
        && params.sigma_tau > 0.0
        && params.sigma_delta2 > 0.0
        && params.sigma_rho2 > 0.0
        && params.sigma_zeta_yoe > 0.0
        && params.sigma_zeta_age > 0.0
        && params.lambda > 0.0
        && params.sigma_y > 0.0
        && params
            .zeta_yoe10
            .iter()
            .chain(&params.zeta_yoe5)
            .chain(&params.zeta_age10)
            .chain(&params.zeta_age5)
            .all(|&z| (0.0..=ZETA_MAX).contains(&z));
    if !in_support {
        return Ok(f64::NEG_INFINITY);
    }
    let state = model_state(params, inputs)?;
    Ok(log_prior_generic(params, &state.d, mu_kappa))
}

/// Two-part likelihood over a dense expected-population vector aligned
/// with the grid (f64 reference path).
pub fn log_likelihood(
    params: &ParameterSet,
    jhat: &[f64],
    data: &SurveyDataset,
    inputs: &ModelInputs,
) -> Result<f64> {
    if jhat.len() != inputs.grid.len() {
        return Err(Error::domain("jhat length != grid size"));
    }
    let mut ll = 0.0;
    for &svy in inputs.grid.survey_years() {
        ll += log_likelihood_year(params, jhat, data, inputs, svy)?;
    }
    Ok(ll)
}

/// One survey year's likelihood contribution (the joint decomposes by
/// year; see the decomposition test).
pub fn log_likelihood_year(
    params: &ParameterSet,
    jhat: &[f64],
    data: &SurveyDataset,
    inputs: &ModelInputs,
    svy: i32,
) -> Result<f64> {
    let range = inputs
        .grid
        .year_range(svy)
        .ok_or_else(|| Error::domain(format!("{svy} not in grid")))?;
    let mut ll = 0.0;
    for off in range {
        let (y, o, jh) = (data.y[off], data.o[off], jhat[off]);
        let u = jh * o * params.lambda;
        if y == 0.0 {
            ll += -u; // ln(1 - p) with p = 1 - exp(-u)
        } else {
            let p = -(-u).exp_m1();
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            ll += p.ln();
            let z = (y - jh / p) / params.sigma_y;
            ll += -0.5 * LN_2PI - params.sigma_y.ln() - 0.5 * z * z;
        }
    }
    Ok(ll)
}

// ---------------------------------------------------------------------

/// Value and gradient of the unnormalized log posterior.
#[derive(Debug, Clone)]
pub struct LogDensityResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Set when evaluation hit a non-finite intermediate; the sampler
    /// treats the point as rejected.
    pub rejected: bool,
}

/// Derived quantities of one posterior draw.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub params: ParameterSet,
    /// True population per stratum (grid-aligned).
    pub true_population: Vec<f64>,
    /// Expected survey population per stratum (grid-aligned; zero for
    /// structurally empty and projection-year strata).
    pub expected_survey: Vec<f64>,
    /// Immigration volume per entry year.
    pub immigration: Vec<f64>,
}

/// Bisection root of the weighted mean undercount rate as a function of
/// a common additive offset. `gk` holds (kappa + l, weight) per group.
/// Returns the root and the derivative of the weighted mean at it.
fn solve_calibration_offset(gk: &[(f64, f64)], target: f64) -> Result<(f64, f64)> {
    let total_w: f64 = gk.iter().map(|g| g.1).sum();
    if !(total_w > 0.0) {
        return Err(Error::numeric("calibration weights vanished"));
    }
    let mean_rate = |off: f64| -> f64 {
        gk.iter()
            .map(|&(xk, w)| w / (1.0 + (-(xk + off)).exp()))
            .sum::<f64>()
            / total_w
    };
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    if mean_rate(lo) > target || mean_rate(hi) < target {
        return Err(Error::numeric("undercount target unreachable"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let off0 = 0.5 * (lo + hi);
    let dfd: f64 = gk
        .iter()
        .map(|&(xk, w)| {
            let r = 1.0 / (1.0 + (-(xk + off0)).exp());
            w * r * (1.0 - r)
        })
        .sum::<f64>()
        / total_w;
    if !(dfd > 0.0) {
        return Err(Error::numeric("degenerate calibration derivative"));
    }
    Ok((off0, dfd))
}

impl crate::inference::LogDensity for PosteriorModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let r = PosteriorModel::value_and_grad(self, x);
        (r.value, r.gradient)
    }
}

/// The full differentiable model: data, grid, transforms, calibration.
pub struct PosteriorModel {
    pub inputs: ModelInputs,
    pub data: SurveyDataset,
    pub layout: ParamLayout,
    pub mu_kappa: Vec<f64>,
    pub targets: CalibrationTargets,
    tape: Tape,
    /// Per survey year: (year, slice start, zero cells (offset, o),
    /// nonzero cells (offset, y, o)).
    cells: Vec<YearCells>,
    /// Survey-year indices inside the calibration period.
    cal_idx: Vec<usize>,
}

struct YearCells {
    svy: i32,
    zeros: Vec<(usize, f64)>,
    nonzeros: Vec<(usize, f64, f64)>,
}

impl PosteriorModel {
    pub fn new(inputs: ModelInputs, data: SurveyDataset) -> Result<Self> {
        Self::with_kappa_scale(inputs, data, 1.0)
    }

    /// `kappa_scale` is the proportionality constant linking prior means
    /// of the undercount terms to inverse root sample size.
    pub fn with_kappa_scale(
        inputs: ModelInputs,
        data: SurveyDataset,
        kappa_scale: f64,
    ) -> Result<Self> {
        if data.y.len() != inputs.grid.len() {
            return Err(Error::data("dataset does not match the grid"));
        }
        let layout = ParamLayout::for_inputs(&inputs);
        let mu_kappa = data.mu_kappa(kappa_scale);
        let targets = CalibrationTargets::default();
        let mut cells = Vec::new();
        for &svy in inputs.grid.survey_years() {
            let range = inputs.grid.year_range(svy).unwrap();
            let mut zeros = Vec::new();
            let mut nonzeros = Vec::new();
            for off in range.clone() {
                if data.y[off] > 0.0 {
                    nonzeros.push((off - range.start, data.y[off], data.o[off]));
                } else {
                    zeros.push((off - range.start, data.o[off]));
                }
            }
            cells.push(YearCells { svy, zeros, nonzeros });
        }
        let (p0, p1) = targets.period;
        let cal_idx = inputs
            .grid
            .survey_years()
            .iter()
            .enumerate()
            .filter(|(_, &y)| (p0..=p1).contains(&y))
            .map(|(i, _)| i)
            .collect();
        Ok(PosteriorModel {
            inputs,
            data,
            layout,
            mu_kappa,
            targets,
            tape: Tape::with_capacity(1 << 20),
            cells,
            cal_idx,
        })
    }

    /// Drop one survey year's likelihood terms (its strata become purely
    /// predictive; the year's undercount term stays, informed by its
    /// prior and the calibration constraint).
    pub fn hold_out_year(&mut self, year: i32) -> Result<()> {
        if !self.inputs.grid.survey_years().contains(&year) {
            return Err(Error::data(format!("{year} is not a survey year")));
        }
        self.cells.retain(|yc| yc.svy != year);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Starting point for the sampler: prior means for most parameters,
    /// with the immigration levels moment-matched to the observed data.
    /// The prior-mean level (one entrant per year) is tens of log units
    /// from any realistic posterior, which warmup cannot bridge; seeding
    /// each entry-year level with the log of its earliest observed cohort
    /// total starts the chains inside the plausible region.
    ///
    /// Observed cohort totals carry the entry-year heaping artifact: a
    /// round year with a heap fraction `z` and `m` donor years shows
    /// roughly `(1 + m z) / (1 - z)` times the level of its neighbors.
    /// Feeding those spikes into the levels directly parks every chain in
    /// a spurious mode where heaping is explained by immigration swings,
    /// which the sampler cannot leave within a bounded warmup. The init
    /// therefore estimates the heap fractions from the spike ratios,
    /// seeds the heap parameters with them, and de-heaps the totals
    /// before taking logs.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut p = ParameterSet::prior_means(&self.inputs);
        p.kappa.clone_from(&self.mu_kappa);
        let grid = &self.inputs.grid;
        // Observed population total per (survey year, entry year) from the
        // retained likelihood cells.
        let mut totals: std::collections::HashMap<(i32, i32), f64> =
            std::collections::HashMap::new();
        for cells in &self.cells {
            let svy = cells.svy;
            // Cell offsets are relative to the survey year's slice.
            let start = grid.year_range(svy).map(|r| r.start).unwrap_or(0);
            for &(pos, y, _) in &cells.nonzeros {
                let key = grid.key(start + pos);
                *totals.entry((svy, key.yoe)).or_insert(0.0) += y;
            }
        }
        // Representative observed total per entry year: the earliest
        // survey with a nonzero cohort total (closest to the entry flow
        // before attrition accumulates), corrected for the partial-year
        // exposure of cohorts first seen in their own entry year.
        let years = &self.inputs.entry_years;
        let mut raw = vec![0.0f64; years.len()];
        for (i, &yoe) in years.iter().enumerate() {
            if let Some((svy, t)) = grid
                .survey_years()
                .iter()
                .filter(|&&svy| svy >= yoe)
                .find_map(|&svy| {
                    totals
                        .get(&(svy, yoe))
                        .copied()
                        .filter(|t| *t > 0.0)
                        .map(|t| (svy, t))
                })
            {
                let py = if svy == yoe {
                    crate::observation::partial_year_factor(svy)
                } else {
                    1.0
                };
                raw[i] = t / py;
            }
        }
        let idx_of = |y: i32| -> Option<usize> {
            years
                .iter()
                .position(|&v| v == y)
                .filter(|&i| raw[i] > 0.0)
        };
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        };
        // Heap fraction estimates per heap target from the spike ratio
        // against the donor-window median, kept interior to the box.
        let estimate = |center: i32, reach: i32, slot: &mut f64| {
            let Some(ci) = idx_of(center) else { return };
            let donors: Vec<f64> = (center - reach..=center + reach)
                .filter(|&y| y != center)
                .filter_map(idx_of)
                .map(|i| raw[i])
                .collect();
            if donors.len() < 3 {
                return;
            }
            let m = donors.len() as f64;
            let r = raw[ci] / median(donors);
            *slot = ((r - 1.0) / (m + r)).clamp(0.005, 0.24);
        };
        for k in 0..p.zeta_yoe10.len() {
            let mut z = p.zeta_yoe10[k];
            estimate(1950 + 10 * k as i32, 4, &mut z);
            p.zeta_yoe10[k] = z;
        }
        for k in 0..p.zeta_yoe5.len() {
            let mut z = p.zeta_yoe5[k];
            estimate(1955 + 10 * k as i32, 2, &mut z);
            p.zeta_yoe5[k] = z;
        }
        // De-heap: donors scale up by their donated fraction, heap
        // targets give back the mass received from present donors.
        let mut flow = raw.clone();
        for (i, &yoe) in years.iter().enumerate() {
            if raw[i] <= 0.0 {
                continue;
            }
            let mut donated = 0.0;
            let dec = (f64::from(yoe - 1950) / 10.0).round() as i32;
            if dec >= 0 && (dec as usize) < p.zeta_yoe10.len() {
                let target = 1950 + 10 * dec;
                if target != yoe && (yoe - target).abs() <= 4 {
                    donated += p.zeta_yoe10[dec as usize];
                }
            }
            let half = (f64::from(yoe - 1955) / 10.0).round() as i32;
            if half >= 0 && (half as usize) < p.zeta_yoe5.len() {
                let target = 1955 + 10 * half;
                if target != yoe && (yoe - target).abs() <= 2 {
                    donated += p.zeta_yoe5[half as usize];
                }
            }
            flow[i] = raw[i] / (1.0 - donated);
        }
        let give_back = |center: i32, reach: i32, z: f64, flow: &mut [f64]| {
            let Some(ci) = idx_of(center) else { return };
            let received: f64 = (center - reach..=center + reach)
                .filter(|&y| y != center)
                .filter_map(idx_of)
                .map(|i| flow[i])
                .sum::<f64>()
                * z;
            flow[ci] = (flow[ci] - received).max(0.1 * raw[ci]);
        };
        for k in 0..p.zeta_yoe10.len() {
            give_back(1950 + 10 * k as i32, 4, p.zeta_yoe10[k], &mut flow);
        }
        for k in 0..p.zeta_yoe5.len() {
            give_back(1955 + 10 * k as i32, 2, p.zeta_yoe5[k], &mut flow);
        }
        for (i, &f) in flow.iter().enumerate() {
            if f > 0.0 {
                p.alpha[i] = f.max(1.0).ln();
            }
        }
        let informed: Vec<bool> = flow.iter().map(|&f| f > 0.0).collect();
        if grid.include_pre1950() {
            let bucket: f64 = grid
                .survey_years()
                .first()
                .and_then(|&svy| {
                    grid.year_range(svy).map(|range| {
                        range
                            .filter(|&off| grid.key(off).is_pre1950())
                            .map(|off| self.data.y[off])
                            .sum()
                    })
                })
                .unwrap_or(0.0);
            if bucket > 0.0 {
                p.alpha0 = bucket.max(1.0).ln();
            }
        }
        // Refine the levels with a few fixed-point passes of the forward
        // model: attrition, undercount, heaping, and partial-year exposure
        // all scale a cohort's expected total, so the log-ratio of the
        // observed to the expected cohort total at the same survey is a
        // direct correction to the level. (The hurdle is mean-preserving
        // over the whole slice, so summing only observed cells is fair.)
        for _ in 0..3 {
            let Ok(x) = self.layout.unconstrain(&p) else { break };
            let Ok(pred) = self.predict(&x) else { break };
            let mut expected: std::collections::HashMap<(i32, i32), f64> =
                std::collections::HashMap::new();
            for &svy in grid.survey_years() {
                let range = grid.year_range(svy).unwrap();
                for off in range {
                    let key = grid.key(off);
                    *expected.entry((svy, key.yoe)).or_insert(0.0) +=
                        pred.expected_survey[off];
                }
            }
            for (i, &yoe) in years.iter().enumerate() {
                if !informed[i] {
                    continue;
                }
                let pick = grid.survey_years().iter().filter(|&&svy| svy >= yoe).find_map(
                    |&svy| {
                        let obs = totals.get(&(svy, yoe)).copied().filter(|t| *t > 0.0)?;
                        let exp = expected.get(&(svy, yoe)).copied().filter(|t| *t > 0.0)?;
                        Some(obs / exp)
                    },
                );
                if let Some(ratio) = pick {
                    p.alpha[i] += ratio.clamp(0.2, 5.0).ln();
                }
            }
        }
        // Entry years never observed (projection years, gaps) continue the
        // last informed level rather than dropping back to the prior mean.
        let mut last = None;
        for (a, &inf) in p.alpha.iter_mut().zip(&informed) {
            if inf {
                last = Some(*a);
            } else if let Some(l) = last {
                *a = l;
            }
        }
        // Moment-matched observation noise: the root mean square residual
        // between the observed counts and their conditional expectations.
        if let Ok(x) = self.layout.unconstrain(&p) {
            if let Ok(pred) = self.predict(&x) {
                let mut ss = 0.0;
                let mut n = 0usize;
                for yc in &self.cells {
                    let start = grid.year_range(yc.svy).map(|r| r.start).unwrap_or(0);
                    for &(pos, y, o) in &yc.nonzeros {
                        let jh = pred.expected_survey[start + pos];
                        if jh <= 0.0 {
                            continue;
                        }
                        let incl = -((-jh * o * p.lambda).exp_m1());
                        if incl > 1e-12 {
                            ss += (y - jh / incl).powi(2);
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    p.sigma_y = (ss / n as f64).sqrt().clamp(1.0, 1e4);
                }
            }
        }
        self.layout.unconstrain(&p).expect("prior means are interior")
    }

    /// f64 posterior value (no gradient).
    pub fn value(&self, x: &[f64]) -> f64 {
        match self.eval(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Posterior value and gradient via the tape.
    pub fn value_and_grad(&self, x: &[f64]) -> LogDensityResult {
        let dim = self.dim();
        assert_eq!(x.len(), dim);
        if x.iter().any(|v| !v.is_finite()) {
            return LogDensityResult {
                value: f64::NEG_INFINITY,
                gradient: vec![0.0; dim],
                rejected: true,
            };
        }
        self.tape.clear();
        let leaves: Vec<Var<'_>> = x.iter().map(|&v| self.tape.leaf(v)).collect();
        match self.eval(&leaves) {
            Ok(out) if out.value().is_finite() => {
                let mut gradient = vec![0.0; dim];
                self.tape.gradient(out, &leaves, &mut gradient);
                if gradient.iter().any(|g| !g.is_finite()) {
                    return LogDensityResult {
                        value: f64::NEG_INFINITY,
                        gradient: vec![0.0; dim],
                        rejected: true,
                    };
                }
                LogDensityResult {
                    value: out.value(),
                    gradient,
                    rejected: false,
                }
            }
            _ => LogDensityResult {
                value: f64::NEG_INFINITY,
                gradient: vec![0.0; dim],
                rejected: true,
            },
        }
    }

    /// True population summed by (calibration survey year, yse): the
    /// weights of the undercount calibration constraint.
    fn calibration_groups<T: Real>(&self, j: &[T]) -> Vec<(usize, i32, T)> {
        let inputs = &self.inputs;
        let mut groups: Vec<(usize, i32, T)> = Vec::new();
        for &si in &self.cal_idx {
            let svy = inputs.grid.survey_years()[si];
            let range = inputs.grid.year_range(svy).unwrap();
            let max_yse = svy - crate::strata::ENTRY_BOTTOM;
            let mut by_yse: Vec<Option<T>> = vec![None; (max_yse + 1) as usize];
            for off in range {
                let yse = inputs.grid.key(off).yse() as usize;
                let jv = j[off];
                by_yse[yse] = Some(match by_yse[yse] {
                    Some(cur) => cur + jv,
                    None => jv,
                });
            }
            for (yse, w) in by_yse.into_iter().enumerate() {
                if let Some(w) = w {
                    groups.push((si, yse as i32, w));
                }
            }
        }
        groups
    }

    /// Per-draw derived quantities for summaries and validation.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let (params, _) = self.layout.constrain::<f64>(x)?;
        let inputs = &self.inputs;
        let state = model_state(&params, inputs)?;
        let l = decay_curve(&params.phi, inputs, 0.0);
        let target = self.targets.target(self.data.region);
        let offset = if self.cal_idx.is_empty() {
            0.0
        } else {
            let groups = self.calibration_groups(&state.j);
            let gk: Vec<(f64, f64)> = groups
                .iter()
                .map(|&(si, yse, w)| (params.kappa[si] + l_at(&l, yse), w))
                .collect();
            solve_calibration_offset(&gk, target)?.0
        };
        let kappa_eff: Vec<f64> = params
            .kappa
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if self.cal_idx.contains(&i) {
                    k + offset
                } else {
                    k
                }
            })
            .collect();
        let obs = Observation::build(&params, inputs, kappa_eff)?;
        let mut expected_survey = vec![0.0; inputs.grid.len()];
        for &svy in inputs.grid.survey_years() {
            let jhat = obs.expected_for_year(&state.j, inputs, svy)?;
            let range = inputs.grid.year_range(svy).unwrap();
            for (pos, v) in jhat.into_iter().enumerate() {
                if let Some(v) = v {
                    expected_survey[range.start + pos] = v;
                }
            }
        }
        let immigration = state.immigration.clone();
        Ok(Prediction {
            params,
            true_population: state.j,
            expected_survey,
            immigration,
        })
    }

    /// Shared evaluation path for both scalar types.
    fn eval<T: Real>(&self, x: &[T]) -> Result<T> {
        let (params, log_jac) = self.layout.constrain(x)?;
        let inputs = &self.inputs;
        let state = model_state(&params, inputs)?;
        let zero = params.lambda.lift(0.0);

        // Undercount calibration: group the true population by
        // (survey year, yse) over the calibration period, solve for the
        // offset in f64, then take one Newton step in the generic type so
        // implicit sensitivities flow through the result.
        let l = decay_curve(&params.phi, inputs, zero);
        let target = self.targets.target(self.data.region);
        let offset = if self.cal_idx.is_empty() {
            zero
        } else {
            let groups = self.calibration_groups(&state.j);
            // f64 bisection for the root of the weighted mean rate.
            let gk: Vec<(f64, f64)> = groups
                .iter()
                .map(|&(si, yse, w)| {
                    (
                        params.kappa[si].value() + l_at(&l, yse).value(),
                        w.value(),
                    )
                })
                .collect();
            let (off0, dfd) = solve_calibration_offset(&gk, target)?;
            // F(off0) in the generic type, then offset = off0 - F/F'.
            let mut f_num = zero;
            let mut f_den = zero;
            for &(si, yse, w) in &groups {
                let xk = (params.kappa[si] + l_at(&l, yse)).addf(off0);
                let rate = (-xk).exp().addf(1.0).fdiv(1.0);
                f_num = f_num + w * rate;
                f_den = f_den + w;
            }
            let f_t = (f_num / f_den).addf(-target);
            f_t.mulf(-1.0 / dfd).addf(off0)
        };

        // Effective kappa with the calibration offset over the period.
        let kappa_eff: Vec<T> = params
            .kappa
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if self.cal_idx.contains(&i) {
                    k + offset
                } else {
                    k
                }
            })
            .collect();
        let obs = Observation::build(&params, inputs, kappa_eff)?;

        // Likelihood.
        let mut lnp_sum = zero;
        let mut zero_exposure = zero; // sum of jhat * o over empty strata
        let mut sq_sum = zero;
        let mut n_pos = 0usize;
        for yc in &self.cells {
            let jhat = obs.expected_for_year(&state.j, inputs, yc.svy)?;
            for &(pos, o) in &yc.zeros {
                if let Some(jh) = jhat[pos] {
                    zero_exposure = jh.fmaf(o, zero_exposure);
                }
            }
            for &(pos, y, o) in &yc.nonzeros {
                let jh = match jhat[pos] {
                    Some(v) => v,
                    None => return Err(Error::numeric("observed stratum has zero expectation")),
                };
                let u = jh.mulf(o) * params.lambda;
                let p = -((-u).expm1());
                lnp_sum = lnp_sum + p.ln();
                let r = (jh / p).subf(y);
                sq_sum = r.fma(r, sq_sum);
                n_pos += 1;
            }
        }
        let ll = lnp_sum - params.lambda * zero_exposure
            - sq_sum / params.sigma_y.sq().mulf(2.0)
            - params.sigma_y.ln().mulf(n_pos as f64).addf(0.5 * LN_2PI * n_pos as f64);

        let lp = log_prior_generic(&params, &state.d, &self.mu_kappa);
        Ok(lp + ll + log_jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::true_population;
    use crate::lifetable::LifeTable;
    use crate::observation::{build_heap_operator, expected_survey_population, UndercountSchedule};
    use crate::strata::{GridSpec, StrataGrid};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn small_inputs() -> ModelInputs {
        let spec = GridSpec {
            survey_years: (2012..=2016).collect(),
            projection_years: vec![],
            entry_year_min: 2000,
            include_pre1950: true,
        };
        let grid = StrataGrid::enumerate(&spec).unwrap();
        ModelInputs::new(grid, LifeTable::default_2012()).unwrap()
    }

    fn synthetic_data(inputs: &ModelInputs, seed: u64) -> (ParameterSet, SurveyDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::prior_means(inputs);
        for a in p.alpha.iter_mut() {
            *a = rng.gen_range(6.5..7.5);
        }
        p.alpha0 = 7.0;
        p.kappa.iter_mut().for_each(|k| *k = -2.0);
        p.sigma_y = 20.0;
        let j = true_population(&p, inputs).unwrap();
        let grid = &inputs.grid;
        let o = 0.01f64;
        let mut y = vec![0.0; grid.len()];
        let mut ov = vec![0.0; grid.len()];
        for &svy in grid.survey_years() {
            let heap = build_heap_operator(&p, inputs, svy).unwrap();
            let uc = UndercountSchedule::from_params(&p, inputs).unwrap();
            let jhat = expected_survey_population(&j, &heap, &uc, inputs, svy).unwrap();
            for off in grid.year_range(svy).unwrap() {
                let u = jhat[off] * o * p.lambda;
                let prob = -(-u).exp_m1();
                if rng.gen::<f64>() < prob {
                    let noise = NormalDist::new(jhat[off] / prob, p.sigma_y)
                        .unwrap()
                        .sample(&mut rng);
                    y[off] = noise.max(1.0);
                    ov[off] = o;
                }
            }
        }
        let n_svy = grid.survey_years().len();
        let data =
            SurveyDataset::new(grid, y, ov, vec![50_000.0; n_svy], Region::Other).unwrap();
        (p, data)
    }

    #[test]
    fn prior_interval_of_initial_stock() {
        // exp(alpha0) under Normal(0, 10): equal-tailed 95% interval.
        let lo = (-Z95 * 10.0f64).exp();
        let hi = (Z95 * 10.0f64).exp();
        assert!((lo * 1e9 - 3.1).abs() < 0.05, "{lo:e}");
        assert!((hi / 1e8 - 3.3).abs() < 0.05, "{hi:e}");
    }

    #[test]
    fn top_age_prior_mean_adjustment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = NormalDist::new(1.38, 0.25).unwrap();
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| dist.sample(&mut rng).exp()).sum::<f64>() / n as f64;
        assert!((mean - 4.1).abs() < 0.05, "mean exp(rho) = {mean}");
    }

    #[test]
    fn lambda_prior_mean_is_one() {
        // Gamma(5, 5) has mean shape/rate = 1 exactly; check the density
        // is centered accordingly via its analytic mode (shape-1)/rate.
        let shape = 5.0f64;
        let rate = 5.0f64;
        assert_eq!(shape / rate, 1.0);
        // Density sanity: mode at 0.8 beats neighbors.
        let at = |x: f64| gamma_lpdf(x, shape, rate);
        assert!(at(0.8) > at(0.7) && at(0.8) > (at(0.9)));
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-10);
    }

    #[test]
    fn transforms_round_trip() {
        let inputs = small_inputs();
        let layout = ParamLayout::for_inputs(&inputs);
        let mut p = ParameterSet::prior_means(&inputs);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        p.alpha.iter_mut().for_each(|a| *a = rng.gen_range(-2.0..9.0));
        p.zeta_age10
            .iter_mut()
            .for_each(|z| *z = rng.gen_range(0.001..0.249));
        p.sigma_y = 123.0;
        p.lambda = 0.7;
        let x = layout.unconstrain(&p).unwrap();
        assert_eq!(x.len(), layout.dim());
        let (q, _) = layout.constrain::<f64>(&x).unwrap();
        let pairs = [
            (p.alpha0, q.alpha0),
            (p.sigma_alpha1, q.sigma_alpha1),
            (p.sigma_tau, q.sigma_tau),
            (p.theta, q.theta),
            (p.lambda, q.lambda),
            (p.sigma_y, q.sigma_y),
        ];
        for (a, b) in pairs {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in p.alpha.iter().zip(&q.alpha) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.zeta_age10.iter().zip(&q.zeta_age10) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hurdle_probability_algebra() {
        // jhat * o * lambda = ln 2 gives p = 0.5.
        let u = 2.0f64.ln();
        let p = -(-u).exp_m1();
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_stratum_contributes_nothing_when_unobserved() {
        let inputs = small_inputs();
        let (p, data) = synthetic_data(&inputs, 13);
        let mut jhat = vec![0.0; inputs.grid.len()];
        // All-zero expectation: zero cells contribute exactly 0 each.
        let mut data_zero = data.clone();
        data_zero.y.iter_mut().for_each(|y| *y = 0.0);
        let data_zero = SurveyDataset::new(
            &inputs.grid,
            data_zero.y,
            vec![0.0; inputs.grid.len()],
            data.sample_size.clone(),
            Region::Other,
        )
        .unwrap();
        let ll = log_likelihood(&p, &jhat, &data_zero, &inputs).unwrap();
        assert_eq!(ll, 0.0);
        // But an observed stratum with zero expectation sinks everything.
        jhat.iter_mut().for_each(|v| *v = 0.0);
        let ll = log_likelihood(&p, &jhat, &data, &inputs).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn likelihood_decomposes_by_year() {
        let inputs = small_inputs();
        let (p, data) = synthetic_data(&inputs, 14);
        let j = true_population(&p, &inputs).unwrap();
        let uc = UndercountSchedule::from_params(&p, &inputs).unwrap();
        let mut jhat = vec![0.0; inputs.grid.len()];
        for &svy in inputs.grid.survey_years() {
            let heap = build_heap_operator(&p, &inputs, svy).unwrap();
            let one = expected_survey_population(&j, &heap, &uc, &inputs, svy).unwrap();
            for (t, v) in jhat.iter_mut().zip(one) {
                *t += v;
            }
        }
        let joint = log_likelihood(&p, &jhat, &data, &inputs).unwrap();
        let sum: f64 = inputs
            .grid
            .survey_years()
            .iter()
            .map(|&svy| log_likelihood_year(&p, &jhat, &data, &inputs, svy).unwrap())
            .sum();
        assert!((joint - sum).abs() < 1e-9);
    }

    #[test]
    fn likelihood_shift_matches_quadratic_form() {
        let inputs = small_inputs();
        let (p, data) = synthetic_data(&inputs, 15);
        let j = true_population(&p, &inputs).unwrap();
        let uc = UndercountSchedule::from_params(&p, &inputs).unwrap();
        let mut jhat = vec![0.0; inputs.grid.len()];
        for &svy in inputs.grid.survey_years() {
            let heap = build_heap_operator(&p, &inputs, svy).unwrap();
            let one = expected_survey_population(&j, &heap, &uc, &inputs, svy).unwrap();
            for (t, v) in jhat.iter_mut().zip(one) {
                *t += v;
            }
        }
        let base = log_likelihood(&p, &jhat, &data, &inputs).unwrap();
        let c = 3.0;
        let mut shifted = data.clone();
        let mut sum_resid = 0.0;
        let mut n = 0usize;
        for (off, y) in shifted.y.iter_mut().enumerate() {
            if *y > 0.0 {
                let svy = inputs.grid.key(off).cyr;
                let range = inputs.grid.year_range(svy).unwrap();
                assert!(range.contains(&off));
                let u = jhat[off] * data.o[off] * p.lambda;
                let prob = -(-u).exp_m1();
                sum_resid += *y - jhat[off] / prob;
                n += 1;
                *y += c;
            }
        }
        let moved = log_likelihood(&p, &jhat, &shifted, &inputs).unwrap();
        let expect = -(c * sum_resid + 0.5 * c * c * n as f64) / (p.sigma_y * p.sigma_y);
        assert!(
            (moved - base - expect).abs() < 1e-7 * expect.abs().max(1.0),
            "{} vs {expect}",
            moved - base
        );
    }

    #[test]
    fn increasing_lambda_increases_every_p() {
        let u1 = |jho: f64, lam: f64| -> f64 { -(-jho * lam).exp_m1() };
        for &jho in &[0.01, 1.0, 7.3] {
            assert!(u1(jho, 2.0) > u1(jho, 1.0));
        }
    }

    #[test]
    fn lambda_grid_search_recovers_truth() {
        let inputs = small_inputs();
        let (p, data) = synthetic_data(&inputs, 16);
        let j = true_population(&p, &inputs).unwrap();
        let uc = UndercountSchedule::from_params(&p, &inputs).unwrap();
        let mut jhat = vec![0.0; inputs.grid.len()];
        for &svy in inputs.grid.survey_years() {
            let heap = build_heap_operator(&p, &inputs, svy).unwrap();
            let one = expected_survey_population(&j, &heap, &uc, &inputs, svy).unwrap();
            for (t, v) in jhat.iter_mut().zip(one) {
                *t += v;
            }
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut lam = 0.5;
        while lam <= 2.0 {
            let mut q = p.clone();
            q.lambda = lam;
            let ll = log_likelihood(&q, &jhat, &data, &inputs).unwrap();
            if ll > best.0 {
                best = (ll, lam);
            }
            lam += 0.01;
        }
        assert!(
            (best.1 - p.lambda).abs() <= 0.05 * p.lambda.max(1.0),
            "recovered lambda {}",
            best.1
        );
    }

    #[test]
    fn posterior_value_routes_agree() {
        let inputs = small_inputs();
        let (_, data) = synthetic_data(&inputs, 17);
        let model = PosteriorModel::new(inputs, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..5 {
            let x: Vec<f64> = model
                .initial_point()
                .iter()
                .map(|v| v + rng.gen_range(-0.2..0.2))
                .collect();
            let v = model.value(&x);
            let res = model.value_and_grad(&x);
            assert!(v.is_finite());
            assert!(!res.rejected);
            assert!((v - res.value).abs() < 1e-9 * v.abs().max(1.0));
        }
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let inputs = small_inputs();
        let (_, data) = synthetic_data(&inputs, 19);
        let model = PosteriorModel::new(inputs, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let base = model.initial_point();
        for _ in 0..3 {
            let x: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            let res = model.value_and_grad(&x);
            assert!(!res.rejected);
            // Probe a subset of coordinates, including every block type.
            let dim = x.len();
            let mut idx: Vec<usize> =
                vec![0, 1, dim - 1, dim - 2, dim - 10, dim / 2, dim / 3, 40, 41];
            idx.dedup();
            for &i in &idx {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[i] += h;
                lo[i] -= h;
                let fd = (model.value(&hi) - model.value(&lo)) / (2.0 * h);
                let rel = (res.gradient[i] - fd).abs()
                    / fd.abs().max(res.gradient[i].abs()).max(1.0);
                assert!(
                    rel < 1e-5,
                    "coord {i}: ad {} fd {fd} rel {rel}",
                    res.gradient[i]
                );
            }
        }
    }

    #[test]
    fn rejection_on_nonfinite_point() {
        let inputs = small_inputs();
        let (_, data) = synthetic_data(&inputs, 21);
        let model = PosteriorModel::new(inputs, data).unwrap();
        let mut x = model.initial_point();
        x[0] = f64::NAN;
        let res = model.value_and_grad(&x);
        assert!(res.rejected);
        assert_eq!(res.value, f64::NEG_INFINITY);
        assert!(res.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mu_kappa_scales_with_sample_size() {
        let inputs = small_inputs();
        let (_, mut data) = synthetic_data(&inputs, 22);
        data.sample_size = vec![1.0e6, 4.0e4, 4.0e4, 4.0e4, 4.0e4];
        let mu = data.mu_kappa(1.0);
        assert!((mu[0] - 1e-3).abs() < 1e-12);
        assert!((mu[1] - 5e-3).abs() < 1e-12);
        // Largest sample gives the smallest prior mean.
        assert!(mu[0] < mu[1]);
    }

    #[test]
    fn empty_strata_get_mean_inverse_weight() {
        let inputs = small_inputs();
        let grid = &inputs.grid;
        let mut y = vec![0.0; grid.len()];
        let mut o = vec![0.0; grid.len()];
        let range = grid.year_range(2012).unwrap();
        y[range.start] = 10.0;
        o[range.start] = 0.004;
        y[range.start + 1] = 20.0;
        o[range.start + 1] = 0.008;
        let data = SurveyDataset::new(
            grid,
            y,
            o,
            vec![1000.0; grid.survey_years().len()],
            Region::Other,
        )
        .unwrap();
        assert!((data.o[range.start + 2] - 0.006).abs() < 1e-12);
    }
}
