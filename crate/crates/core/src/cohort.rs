//! Deterministic forward model: maps a parameter set to the true
//! population per stratum and the annual immigration series.
//!
//! Every routine is generic over [`Real`], so the same arithmetic runs on
//! plain `f64` (summaries, simulation, finite differences) and on tape
//! variables (gradient evaluation).

use crate::error::{Error, Result};
use crate::lifetable::LifeTable;
use crate::splines::{build_basis, build_decay_spline, KnotRule, SplineBasis, CUBIC_ORDER};
use crate::strata::{StrataGrid, StratumKey, AGE_TOP, ENTRY_BOTTOM};
use crate::tape::Real;

/// Control points for the average age-of-entry spline.
pub const N_AGE_BASIS: usize = 17;
/// Control points per axis of the temporal-deviation surface (entry year
/// axis) and of the top-age adjustment spline.
pub const N_YOE_BASIS: usize = 7;
/// Control points for the mortality-deviation spline.
pub const N_MORT_BASIS: usize = 7;
/// Emigration and undercount decay splines: coefficients and plateau year.
pub const N_DECAY_BASIS: usize = 4;
pub const DECAY_HORIZON: usize = 15;
/// Heap-fraction vector lengths: decades 1950..=2010, half-decades
/// 1955..=1995, age decades 10..=90, age half-decades 5..=85.
pub const N_ZETA_YOE10: usize = 7;
pub const N_ZETA_YOE5: usize = 5;
pub const N_ZETA_AGE10: usize = 9;
pub const N_ZETA_AGE5: usize = 9;
/// Calendar year the bundled life table refers to.
pub const MORT_REF_YEAR: i32 = 2012;
/// First calendar year with an explicit mortality schedule; the pre-1950
/// stock is exposed to exits from this year onward.
pub const MORT_YEAR0: i32 = ENTRY_BOTTOM + 1;

/// Every sampled quantity of the model, generic over the scalar type.
#[derive(Debug, Clone)]
pub struct Params<T> {
    /// Log of the total resident stock at the beginning of 1950.
    pub alpha0: T,
    /// Log annual immigration volume per regular entry year.
    pub alpha: Vec<T>,
    pub sigma_alpha1: T,
    pub sigma_alpha2: T,
    /// Average age-of-entry spline coefficients (17).
    pub gamma: Vec<T>,
    pub sigma_gamma2: T,
    /// Temporal-deviation surface coefficients, row-major 17 x 7.
    pub tau: Vec<T>,
    pub sigma_tau: T,
    /// Mortality-deviation spline coefficients (7).
    pub delta: Vec<T>,
    pub sigma_delta2: T,
    /// Log annual decline in mortality rates.
    pub theta: T,
    /// Free emigration decay coefficients (3; the 4th is tied to the 3rd).
    pub eta: Vec<T>,
    /// Top-age adjustment spline coefficients (7).
    pub rho: Vec<T>,
    pub sigma_rho2: T,
    /// Heap fractions, each in [0, 0.25].
    pub zeta_yoe10: Vec<T>,
    pub zeta_yoe5: Vec<T>,
    pub zeta_age10: Vec<T>,
    pub zeta_age5: Vec<T>,
    pub sigma_zeta_yoe: T,
    pub sigma_zeta_age: T,
    /// Per-survey-year undercount terms.
    pub kappa: Vec<T>,
    /// Free undercount decay coefficients (3; the 4th is tied to the 3rd).
    pub phi: Vec<T>,
    /// Observation-rate adjustment.
    pub lambda: T,
    /// Observation noise scale.
    pub sigma_y: T,
}

/// The concrete f64 parameter container.
pub type ParameterSet = Params<f64>;

impl ParameterSet {
    /// Anchor point for initialization: prior means where those are
    /// finite and interior, pragmatic interior values for scale
    /// parameters (half-Cauchy priors have no mean) and for the boxed
    /// heap fractions (whose prior mass piles up on the boundary).
    pub fn prior_means(inputs: &ModelInputs) -> Self {
        let n_yoe = inputs.entry_years.len();
        let n_svy = inputs.grid.survey_years().len();
        Params {
            alpha0: 0.0,
            alpha: vec![0.0; n_yoe],
            sigma_alpha1: 0.5,
            sigma_alpha2: 0.5,
            gamma: vec![0.0; N_AGE_BASIS],
            sigma_gamma2: 1.0,
            tau: vec![0.0; N_AGE_BASIS * N_YOE_BASIS],
            sigma_tau: 0.3,
            delta: vec![0.0; N_MORT_BASIS],
            sigma_delta2: 0.5,
            theta: -0.013,
            eta: vec![0.10f64.ln(), 0.02f64.ln(), 0.0025f64.ln()],
            rho: vec![1.38; N_YOE_BASIS],
            sigma_rho2: 0.5,
            zeta_yoe10: vec![0.01; N_ZETA_YOE10],
            zeta_yoe5: vec![0.01; N_ZETA_YOE5],
            zeta_age10: vec![0.01; N_ZETA_AGE10],
            zeta_age5: vec![0.01; N_ZETA_AGE5],
            sigma_zeta_yoe: 0.02,
            sigma_zeta_age: 0.02,
            kappa: vec![0.0; n_svy],
            phi: vec![0.10f64.ln(), 0.025f64.ln(), 0.005f64.ln()],
            lambda: 1.0,
            sigma_y: 10.0,
        }
    }
}

impl<T: Real> Params<T> {
    /// Dimension checks against the model inputs.
    pub fn validate(&self, inputs: &ModelInputs) -> Result<()> {
        let checks = [
            (self.alpha.len(), inputs.entry_years.len(), "alpha"),
            (self.gamma.len(), N_AGE_BASIS, "gamma"),
            (self.tau.len(), N_AGE_BASIS * N_YOE_BASIS, "tau"),
            (self.delta.len(), N_MORT_BASIS, "delta"),
            (self.eta.len(), N_DECAY_BASIS - 1, "eta"),
            (self.rho.len(), N_YOE_BASIS, "rho"),
            (self.zeta_yoe10.len(), N_ZETA_YOE10, "zeta_yoe10"),
            (self.zeta_yoe5.len(), N_ZETA_YOE5, "zeta_yoe5"),
            (self.zeta_age10.len(), N_ZETA_AGE10, "zeta_age10"),
            (self.zeta_age5.len(), N_ZETA_AGE5, "zeta_age5"),
            (self.kappa.len(), inputs.grid.survey_years().len(), "kappa"),
            (self.phi.len(), N_DECAY_BASIS - 1, "phi"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::domain(format!(
                    "{name} has length {got}, model needs {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Grid, spline bases, and life-table inputs shared across evaluations.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub grid: StrataGrid,
    /// Age-of-entry basis over aoe 0..=91 (percentile knots).
    pub age_basis: SplineBasis,
    /// Entry-year basis over the regular entry years.
    pub yoe_basis: SplineBasis,
    /// Mortality-deviation basis over age 0..=91.
    pub mort_basis: SplineBasis,
    /// Decay basis over years-since-entry 1..=15.
    pub decay_basis: SplineBasis,
    pub life_table: LifeTable,
    /// Log baseline mortality rate per age (e_age).
    pub log_mort: Vec<f64>,
    /// Regular entry years covered (bucket excluded), ascending.
    pub entry_years: Vec<i32>,
    /// First and last calendar years of the mortality schedule.
    pub mort_year_range: (i32, i32),
}

impl ModelInputs {
    pub fn new(grid: StrataGrid, life_table: LifeTable) -> Result<Self> {
        Self::with_age_weights(grid, life_table, &default_entry_age_weights())
    }

    /// `age_weights[a]` is the relative frequency of entry age `a`, used
    /// to place the percentile knots of the age-of-entry spline.
    pub fn with_age_weights(
        grid: StrataGrid,
        life_table: LifeTable,
        age_weights: &[f64],
    ) -> Result<Self> {
        let ages: Vec<f64> = (0..=AGE_TOP).map(f64::from).collect();
        if age_weights.len() != ages.len() {
            return Err(Error::domain(format!(
                "age weights must cover ages 0..={AGE_TOP}"
            )));
        }
        let age_basis = build_basis(
            &ages,
            N_AGE_BASIS,
            &KnotRule::DataPercentile {
                values: ages.clone(),
                weights: age_weights.to_vec(),
            },
        )?;
        let mort_basis = build_basis(&ages, N_MORT_BASIS, &KnotRule::Uniform)?;
        let entry_years: Vec<i32> = grid.entry_years().collect();
        if entry_years.len() < N_YOE_BASIS {
            return Err(Error::domain(format!(
                "need at least {N_YOE_BASIS} regular entry years, got {}",
                entry_years.len()
            )));
        }
        let yoe_points: Vec<f64> = entry_years.iter().map(|&y| f64::from(y)).collect();
        let yoe_basis = build_basis(&yoe_points, N_YOE_BASIS, &KnotRule::Uniform)?;
        let decay_basis = build_decay_spline(DECAY_HORIZON, N_DECAY_BASIS, true)?;
        let log_mort: Vec<f64> = life_table.rates.iter().map(|r| r.ln()).collect();
        let last_year = *grid.years().last().unwrap();
        let mort_year0 = MORT_YEAR0.min(entry_years[0]);
        Ok(ModelInputs {
            grid,
            age_basis,
            yoe_basis,
            mort_basis,
            decay_basis,
            life_table,
            log_mort,
            entry_years,
            mort_year_range: (mort_year0, last_year),
        })
    }

    /// Dense column index for a regular entry year.
    pub fn yoe_index(&self, yoe: i32) -> Option<usize> {
        if self.entry_years.contains(&yoe) {
            Some((yoe - self.entry_years[0]) as usize)
        } else {
            None
        }
    }

    pub fn n_mort_years(&self) -> usize {
        (self.mort_year_range.1 - self.mort_year_range.0 + 1) as usize
    }
}

/// Plausible age-of-entry histogram used only for knot placement: a broad
/// peak over working ages 20-40 on a uniform floor.
pub fn default_entry_age_weights() -> Vec<f64> {
    (0..=AGE_TOP)
        .map(|a| {
            let x = (f64::from(a) - 27.0) / 12.0;
            (-0.5 * x * x).exp() + 0.05
        })
        .collect()
}

/// Cumulative mortality hazard along cohort diagonals, with ages above
/// the top code held at the age-91 rate.
struct MortPrefix<T> {
    d_min: i32,
    year0: i32,
    /// Per diagonal (birth year): prefix sums over calendar years starting
    /// at `max(year0, d)`; entry `k` is the hazard over the first `k`
    /// years.
    per_diag: Vec<Vec<T>>,
}

impl<T: Real> MortPrefix<T> {
    /// `g[age * n_years + (y - year0)]` must cover ages 0..=91 and years
    /// `year0..=year1`.
    fn build(g: &[T], year0: i32, year1: i32, zero: T) -> Self {
        let n_years = (year1 - year0 + 1) as usize;
        let d_min = year0 - AGE_TOP;
        let mut per_diag = Vec::with_capacity((year1 - d_min + 1) as usize);
        for d in d_min..=year1 {
            let y_start = year0.max(d);
            let mut prefix = Vec::with_capacity((year1 - y_start + 2).max(1) as usize);
            prefix.push(zero);
            let mut acc = zero;
            for y in y_start..=year1 {
                let age = (y - d).min(AGE_TOP) as usize;
                acc = acc + g[age * n_years + (y - year0) as usize];
                prefix.push(acc);
            }
            per_diag.push(prefix);
        }
        MortPrefix {
            d_min,
            year0,
            per_diag,
        }
    }

    /// Hazard summed over calendar years `[from, to)` on diagonal `d`
    /// (birth year).
    fn range_sum(&self, d: i32, from: i32, to: i32) -> T {
        let diag = &self.per_diag[(d - self.d_min) as usize];
        let y_start = self.year0.max(d);
        diag[(to - y_start) as usize] - diag[(from - y_start) as usize]
    }
}

/// All deterministic derived fields of the model for one parameter set.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    /// Mean log age-of-entry curve (92).
    pub a: Vec<T>,
    /// Normalized age-of-entry distribution, row-major `[aoe][yoe]`.
    pub c: Vec<T>,
    /// Pre-normalization column sums (the identification normalizers).
    pub d: Vec<T>,
    /// Age profile of the pre-1950 stock (ages in 1950), sums to 1.
    pub c49: Vec<T>,
    /// Mortality rates, row-major `[age][year - mort_year0]`.
    pub g: Vec<T>,
    /// Emigration rate per years-since-entry 1..=15 (index yse-1).
    pub h: Vec<T>,
    /// `cumh[s]` = emigration hazard summed over entry-time offsets
    /// 1..s-1 with the plateau extension (offset 0 contributes nothing).
    pub cumh: Vec<T>,
    /// Top-age multipliers per regular entry year.
    pub k: Vec<T>,
    /// exp(alpha) per regular entry year.
    pub immigration: Vec<T>,
    /// True population per grid stratum (grid enumeration order).
    pub j: Vec<T>,
}

/// Sparse row-times-coefficients product on the generic scalar.
#[inline]
fn spline_row<T: Real>(basis: &SplineBasis, row: usize, coef: &[T], zero: T) -> T {
    let (s, v) = basis.sparse_row(row);
    let mut acc = zero;
    for k in 0..CUBIC_ORDER {
        acc = coef[s + k].fmaf(v[k], acc);
    }
    acc
}

/// Build every derived field, including the per-stratum true population.
pub fn model_state<T: Real>(params: &Params<T>, inputs: &ModelInputs) -> Result<ModelState<T>> {
    params.validate(inputs)?;
    let grid = &inputs.grid;
    let n_yoe = inputs.entry_years.len();
    let n_ages = (AGE_TOP + 1) as usize;
    let zero = params.alpha0.lift(0.0);
    let (my0, my1) = inputs.mort_year_range;
    let n_years = inputs.n_mort_years();

    // a = M_aoe * gamma
    let a: Vec<T> = (0..n_ages)
        .map(|r| spline_row(&inputs.age_basis, r, &params.gamma, zero))
        .collect();

    // b = M_aoe * tau * M_yoe' via two sparse stages; fold exp(a + b),
    // the normalizers d, and the normalized c in the same pass.
    let mut u = vec![zero; n_ages * N_YOE_BASIS];
    for r in 0..n_ages {
        let (s, v) = inputs.age_basis.sparse_row(r);
        for jcol in 0..N_YOE_BASIS {
            let mut acc = zero;
            for k in 0..CUBIC_ORDER {
                acc = params.tau[(s + k) * N_YOE_BASIS + jcol].fmaf(v[k], acc);
            }
            u[r * N_YOE_BASIS + jcol] = acc;
        }
    }
    let mut c = vec![zero; n_ages * n_yoe];
    let mut d = vec![zero; n_yoe];
    for jy in 0..n_yoe {
        let (sj, w) = inputs.yoe_basis.sparse_row(jy);
        let mut col_sum = zero;
        for r in 0..n_ages {
            let mut b = zero;
            for k in 0..CUBIC_ORDER {
                b = u[r * N_YOE_BASIS + sj + k].fmaf(w[k], b);
            }
            let e = (a[r] + b).exp();
            c[r * n_yoe + jy] = e;
            col_sum = col_sum + e;
        }
        d[jy] = col_sum;
        for r in 0..n_ages {
            c[r * n_yoe + jy] = c[r * n_yoe + jy] / col_sum;
        }
    }

    // Pre-1950 stock age profile: softmax of the average curve.
    let mut c49: Vec<T> = a.iter().map(|&x| x.exp()).collect();
    let mut s49 = zero;
    for &e in &c49 {
        s49 = s49 + e;
    }
    for e in &mut c49 {
        *e = *e / s49;
    }

    // Mortality g[age][year] = exp(e + f + theta * (year - 2012)).
    let mut g = vec![zero; n_ages * n_years];
    let ex_age: Vec<T> = (0..n_ages)
        .map(|r| {
            spline_row(&inputs.mort_basis, r, &params.delta, zero)
                .addf(inputs.log_mort[r])
                .exp()
        })
        .collect();
    for (yi, y) in (my0..=my1).enumerate() {
        let yf = params.theta.mulf(f64::from(y - MORT_REF_YEAR)).exp();
        for (r, &ex) in ex_age.iter().enumerate() {
            g[r * n_years + yi] = ex * yf;
        }
    }

    // Emigration decay with tied last coefficients, then the hazard
    // accumulator with the plateau extension.
    let eta_full = [params.eta[0], params.eta[1], params.eta[2], params.eta[2]];
    let h: Vec<T> = (0..DECAY_HORIZON)
        .map(|r| spline_row(&inputs.decay_basis, r, &eta_full, zero).exp())
        .collect();
    let max_yse = (my1 - ENTRY_BOTTOM) as usize;
    let mut cumh = Vec::with_capacity(max_yse + 1);
    cumh.push(zero);
    cumh.push(zero);
    for s in 2..=max_yse {
        let t = (s - 1).min(DECAY_HORIZON);
        let prev = cumh[s - 1];
        cumh.push(prev + h[t - 1]);
    }

    // Top-age multipliers and the immigration series.
    let k: Vec<T> = (0..n_yoe)
        .map(|jy| spline_row(&inputs.yoe_basis, jy, &params.rho, zero).exp())
        .collect();
    let immigration: Vec<T> = params.alpha.iter().map(|&x| x.exp()).collect();

    // True population per stratum.
    let prefix = MortPrefix::build(&g, my0, my1, zero);
    let stock49 = params.alpha0.exp();
    let mut entry = vec![zero; n_ages * n_yoe];
    for r in 0..n_ages {
        for jy in 0..n_yoe {
            entry[r * n_yoe + jy] = immigration[jy] * c[r * n_yoe + jy];
        }
    }
    let mut j = Vec::with_capacity(grid.len());
    for key in grid.keys() {
        let cyr = key.cyr;
        if key.is_pre1950() {
            let eh = cumh[key.yse() as usize];
            let val = if key.age < AGE_TOP {
                // Age in 1950 for this cell; negative means the cell is
                // logically empty (born after the stock was counted).
                let a0 = key.age - (cyr - MORT_YEAR0);
                if a0 < 0 {
                    zero
                } else {
                    let msum = prefix.range_sum(MORT_YEAR0 - a0, MORT_YEAR0, cyr);
                    stock49 * c49[a0 as usize] * (-(msum + eh)).exp()
                }
            } else {
                // The 91+ cell aggregates every 1950 age that has reached
                // the top code by cyr.
                let a0_min = (AGE_TOP - (cyr - MORT_YEAR0)).max(0);
                let mut acc = zero;
                for a0 in a0_min..=AGE_TOP {
                    let msum = prefix.range_sum(MORT_YEAR0 - a0, MORT_YEAR0, cyr);
                    acc = acc + c49[a0 as usize] * (-(msum + eh)).exp();
                }
                stock49 * acc
            };
            j.push(val);
            continue;
        }
        let jy = (key.yoe - inputs.entry_years[0]) as usize;
        let aoe = key.aoe().unwrap() as usize;
        let yse = key.yse() as usize;
        let base = entry[aoe * n_yoe + jy];
        let mut val = if yse == 0 {
            base
        } else {
            let msum = prefix.range_sum(cyr - key.age, key.yoe, cyr);
            base * (-(msum + cumh[yse])).exp()
        };
        if key.age == AGE_TOP {
            val = val * k[jy];
        }
        j.push(val);
    }

    Ok(ModelState {
        a,
        c,
        d,
        c49,
        g,
        h,
        cumh,
        k,
        immigration,
        j,
    })
}

/// exp(alpha) per regular entry year.
pub fn immigration_series(params: &ParameterSet) -> Vec<f64> {
    params.alpha.iter().map(|a| a.exp()).collect()
}

/// Normalized age-of-entry distribution, row-major `[aoe][yoe]`; every
/// column sums to 1.
pub fn entry_age_distribution(params: &ParameterSet, inputs: &ModelInputs) -> Result<Vec<f64>> {
    Ok(model_state(params, inputs)?.c)
}

/// Mortality rates, row-major `[age][year - mort_year0]` over the model's
/// mortality year range.
pub fn mortality_rate(params: &ParameterSet, inputs: &ModelInputs) -> Result<Vec<f64>> {
    Ok(model_state(params, inputs)?.g)
}

/// Emigration rate per years-since-entry 1..=15 (held at the year-15
/// value beyond the horizon; see [`emigration_at`]).
pub fn emigration_rate(params: &ParameterSet, inputs: &ModelInputs) -> Result<Vec<f64>> {
    Ok(model_state(params, inputs)?.h)
}

/// Emigration rate lookup with the plateau rule; `yse` must be >= 1.
pub fn emigration_at(h: &[f64], yse: usize) -> f64 {
    h[yse.min(DECAY_HORIZON) - 1]
}

/// Cumulative exit probability for one stratum by direct summation of
/// annual hazards (the transparent reference path; `model_state` computes
/// the same quantity through diagonal prefix sums).
///
/// `g` is the mortality matrix from [`mortality_rate`] and `h` the decay
/// curve from [`emigration_rate`]. The entry-year offset contributes no
/// emigration (h_0 = 0), so yse = 0 strata have exit probability 0.
pub fn cumulative_exit(
    g: &[f64],
    h: &[f64],
    key: &StratumKey,
    inputs: &ModelInputs,
) -> Result<f64> {
    key.validate()?;
    let (my0, my1) = inputs.mort_year_range;
    let n_years = inputs.n_mort_years();
    if g.len() != ((AGE_TOP + 1) as usize) * n_years || h.len() != DECAY_HORIZON {
        return Err(Error::domain("g/h dimensions do not match the inputs"));
    }
    if key.cyr > my1 {
        return Err(Error::domain(format!(
            "stratum year {} beyond mortality schedule {my1}",
            key.cyr
        )));
    }
    let yse = key.yse();
    let mut hazard = 0.0;
    if key.is_pre1950() {
        let a0 = key.age - (key.cyr - MORT_YEAR0);
        if a0 < 0 {
            return Err(Error::domain(
                "pre-1950 stratum implies birth after 1950; no exit path",
            ));
        }
        for t in 0..yse {
            if t >= 1 {
                hazard += emigration_at(h, t as usize);
            }
            let y = ENTRY_BOTTOM + t;
            if y >= MORT_YEAR0 {
                let age = (a0 + (y - MORT_YEAR0)).min(AGE_TOP) as usize;
                hazard += g[age * n_years + (y - my0) as usize];
            }
        }
    } else {
        let aoe = key.aoe().unwrap();
        for t in 0..yse {
            if t >= 1 {
                hazard += emigration_at(h, t as usize);
            }
            let age = (aoe + t).min(AGE_TOP) as usize;
            let y = key.yoe + t;
            hazard += g[age * n_years + (y - my0) as usize];
        }
    }
    Ok(-(-hazard).exp_m1())
}

/// True population per stratum in grid enumeration order.
pub fn true_population(params: &ParameterSet, inputs: &ModelInputs) -> Result<Vec<f64>> {
    Ok(model_state(params, inputs)?.j)
}
