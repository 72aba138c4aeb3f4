//! Observation model: maps the true population to the expected surveyed
//! population via heaping reallocation (round ages and entry years),
//! undercount inflation, and partial-year observation of new entrants.

use crate::cohort::{ModelInputs, Params, ParameterSet, DECAY_HORIZON};
use crate::error::{Error, Result};
use crate::splines::CUBIC_ORDER;
use crate::strata::{StratumKey, AGE_TOP, ENTRY_BOTTOM};
use crate::tape::Real;

/// Inclusion fraction for entrants observed by the rolling ACS.
pub const PARTIAL_YEAR_ACS: f64 = 0.5;
/// Inclusion fraction for entrants observed by the April 2000 census.
pub const PARTIAL_YEAR_CENSUS_2000: f64 = 0.25;
/// Heap fractions live in this box.
pub const ZETA_MAX: f64 = 0.25;

/// Origin region flag driving the undercount calibration target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    LatinAmericaCaribbean,
    Other,
}

/// Calibration targets for the mean undercount rate over a period.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationTargets {
    pub lac: f64,
    pub other: f64,
    pub period: (i32, i32),
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets {
            lac: 0.05,
            other: 0.02,
            period: (2005, 2016),
        }
    }
}

impl CalibrationTargets {
    pub fn target(&self, region: Region) -> f64 {
        match region {
            Region::LatinAmericaCaribbean => self.lac,
            Region::Other => self.other,
        }
    }
}

/// One axis of the heap reallocation in sparse form: per source index a
/// retained fraction, plus (source, target, fraction) donations.
#[derive(Debug, Clone)]
pub struct AxisHeap<T> {
    pub n: usize,
    pub keep: Vec<T>,
    pub moves: Vec<(usize, usize, T)>,
}

fn check_zeta<T: Real>(zeta: &[T], name: &str) -> Result<()> {
    for z in zeta {
        let v = z.value();
        if !(0.0..=ZETA_MAX + 1e-12).contains(&v) {
            return Err(Error::domain(format!(
                "{name} fraction {v} outside [0, {ZETA_MAX}]"
            )));
        }
    }
    Ok(())
}

/// Sparse heap structure over a contiguous integer axis.
///
/// `decade_of(x)` / `half_of(x)` return the heap target and fraction index
/// for a source value, if it lies inside a donation window.
fn build_axis<T: Real>(
    values: &[i32],
    zeta10: &[T],
    zeta5: &[T],
    first_decade: i32,
    first_half: i32,
    one: T,
) -> AxisHeap<T> {
    let pos = |v: i32| values.iter().position(|&x| x == v);
    let mut keep = Vec::with_capacity(values.len());
    let mut moves = Vec::new();
    for (src, &v) in values.iter().enumerate() {
        // Nearest decade within 4 years, excluding the decade cell itself.
        let mut donated: Option<T> = None;
        let dec = (f64::from(v - first_decade) / 10.0).round() as i32;
        if dec >= 0 && (dec as usize) < zeta10.len() {
            let target = first_decade + 10 * dec;
            if target != v && (v - target).abs() <= 4 {
                let z = zeta10[dec as usize];
                if let Some(dst) = pos(target) {
                    moves.push((src, dst, z));
                }
                donated = Some(z);
            }
        }
        let half = (f64::from(v - first_half) / 10.0).round() as i32;
        if half >= 0 && (half as usize) < zeta5.len() {
            let target = first_half + 10 * half;
            if target != v && (v - target).abs() <= 2 {
                let z = zeta5[half as usize];
                if let Some(dst) = pos(target) {
                    moves.push((src, dst, z));
                }
                donated = Some(match donated {
                    Some(d) => d + z,
                    None => z,
                });
            }
        }
        keep.push(match donated {
            Some(d) => d.fsub(1.0),
            None => one,
        });
    }
    AxisHeap {
        n: values.len(),
        keep,
        moves,
    }
}

/// Heap structure for the current-age axis (ages 0..=91).
pub fn age_heap<T: Real>(params: &Params<T>) -> Result<AxisHeap<T>> {
    check_zeta(&params.zeta_age10, "zeta_age10")?;
    check_zeta(&params.zeta_age5, "zeta_age5")?;
    let ages: Vec<i32> = (0..=AGE_TOP).collect();
    let one = params.lambda.lift(1.0);
    Ok(build_axis(
        &ages,
        &params.zeta_age10,
        &params.zeta_age5,
        10,
        5,
        one,
    ))
}

/// Heap structure for the entry-year axis over the regular entry years.
/// The pre-1950 bucket is excluded from all donation windows. Donations
/// whose target year is absent from `entry_years` still reduce the
/// source (the reported year falls outside the observed lattice).
pub fn yoe_heap<T: Real>(params: &Params<T>, entry_years: &[i32]) -> Result<AxisHeap<T>> {
    check_zeta(&params.zeta_yoe10, "zeta_yoe10")?;
    check_zeta(&params.zeta_yoe5, "zeta_yoe5")?;
    let one = params.lambda.lift(1.0);
    Ok(build_axis(
        entry_years,
        &params.zeta_yoe10,
        &params.zeta_yoe5,
        1950,
        1955,
        one,
    ))
}

/// Dense row-stochastic reallocation matrices for one survey year, used
/// by the transparent f64 path and the mass-conservation tests.
#[derive(Debug, Clone)]
pub struct HeapOperator {
    pub svy: i32,
    /// 92 x 92 row-major; row = true age, column = reported age.
    pub age_matrix: Vec<f64>,
    /// Row years (true entry years present in the lattice for `svy`).
    pub yoe_rows: Vec<i32>,
    /// Column years (reported entry years, including illogical ones
    /// beyond `svy` so rows still sum to one).
    pub yoe_cols: Vec<i32>,
    /// rows x cols row-major.
    pub yoe_matrix: Vec<f64>,
}

/// Build the dense heap operator for one survey year.
pub fn build_heap_operator(
    params: &ParameterSet,
    inputs: &ModelInputs,
    svy: i32,
) -> Result<HeapOperator> {
    check_zeta(&params.zeta_age10, "zeta_age10")?;
    check_zeta(&params.zeta_age5, "zeta_age5")?;
    check_zeta(&params.zeta_yoe10, "zeta_yoe10")?;
    check_zeta(&params.zeta_yoe5, "zeta_yoe5")?;
    let n_ages = (AGE_TOP + 1) as usize;
    let ages: Vec<i32> = (0..=AGE_TOP).collect();
    let axis_age = build_axis(&ages, &params.zeta_age10, &params.zeta_age5, 10, 5, 1.0);
    let mut age_matrix = vec![0.0; n_ages * n_ages];
    for (src, &k) in axis_age.keep.iter().enumerate() {
        age_matrix[src * n_ages + src] = k;
    }
    for &(src, dst, z) in &axis_age.moves {
        age_matrix[src * n_ages + dst] += z;
    }

    // Entry-year axis: true years are the bucket plus regular entry years
    // up to the survey year; reported years may extend past it.
    let mut yoe_rows = vec![ENTRY_BOTTOM];
    yoe_rows.extend(inputs.entry_years.iter().copied().filter(|&y| y <= svy));
    let mut yoe_cols = yoe_rows.clone();
    let regular: Vec<i32> = yoe_rows[1..].to_vec();
    let probe = build_axis_with_targets(
        &regular,
        &params.zeta_yoe10,
        &params.zeta_yoe5,
        &mut yoe_cols,
    );
    let (rows, cols) = (yoe_rows.len(), yoe_cols.len());
    let mut yoe_matrix = vec![0.0; rows * cols];
    yoe_matrix[0] = 1.0; // bucket row: identity
    let col_of = |y: i32| yoe_cols.iter().position(|&c| c == y).unwrap();
    for (ri, &y) in regular.iter().enumerate() {
        let row = ri + 1;
        yoe_matrix[row * cols + col_of(y)] = probe.keep[ri];
        for &(src, target, z) in &probe.moves {
            if src == ri {
                yoe_matrix[row * cols + col_of(target)] += z;
            }
        }
    }
    Ok(HeapOperator {
        svy,
        age_matrix,
        yoe_rows,
        yoe_cols,
        yoe_matrix,
    })
}

/// Like [`build_axis`] over f64, but records every donation by target
/// *year* (not position) and extends `cols` with out-of-lattice targets.
struct YearMoves {
    keep: Vec<f64>,
    /// (source position, target year, fraction)
    moves: Vec<(usize, i32, f64)>,
}

fn build_axis_with_targets(
    years: &[i32],
    zeta10: &[f64],
    zeta5: &[f64],
    cols: &mut Vec<i32>,
) -> YearMoves {
    let mut keep = Vec::with_capacity(years.len());
    let mut moves = Vec::new();
    for (src, &v) in years.iter().enumerate() {
        let mut donated = 0.0;
        let dec = (f64::from(v - 1950) / 10.0).round() as i32;
        if dec >= 0 && (dec as usize) < zeta10.len() {
            let target = 1950 + 10 * dec;
            if target != v && (v - target).abs() <= 4 {
                let z = zeta10[dec as usize];
                moves.push((src, target, z));
                donated += z;
                if !cols.contains(&target) {
                    cols.push(target);
                }
            }
        }
        let half = (f64::from(v - 1955) / 10.0).round() as i32;
        if half >= 0 && (half as usize) < zeta5.len() {
            let target = 1955 + 10 * half;
            if target != v && (v - target).abs() <= 2 {
                let z = zeta5[half as usize];
                moves.push((src, target, z));
                donated += z;
                if !cols.contains(&target) {
                    cols.push(target);
                }
            }
        }
        keep.push(1.0 - donated);
    }
    cols.sort_unstable();
    YearMoves { keep, moves }
}

/// Undercount inflation schedule: per-survey-year terms, the decay curve
/// by years since entry, and the calibration targets.
#[derive(Debug, Clone)]
pub struct UndercountSchedule {
    pub survey_years: Vec<i32>,
    /// Per-survey-year log terms (calibration offsets already applied by
    /// the caller where relevant).
    pub kappa: Vec<f64>,
    /// Decay values for yse 1..=15 (index yse-1).
    pub l: Vec<f64>,
    pub targets: CalibrationTargets,
}

impl UndercountSchedule {
    pub fn from_params(params: &ParameterSet, inputs: &ModelInputs) -> Result<Self> {
        let survey_years = inputs.grid.survey_years().to_vec();
        if params.kappa.len() != survey_years.len() {
            return Err(Error::domain("kappa length != survey year count"));
        }
        let phi_full = [params.phi[0], params.phi[1], params.phi[2], params.phi[2]];
        let l = (0..DECAY_HORIZON)
            .map(|r| {
                let (s, v) = inputs.decay_basis.sparse_row(r);
                (0..CUBIC_ORDER).map(|k| phi_full[s + k] * v[k]).sum()
            })
            .collect();
        Ok(UndercountSchedule {
            survey_years,
            kappa: params.kappa.clone(),
            l,
            targets: CalibrationTargets::default(),
        })
    }

    fn svy_index(&self, svy: i32) -> Result<usize> {
        self.survey_years
            .iter()
            .position(|&y| y == svy)
            .ok_or_else(|| Error::domain(format!("{svy} is not a survey year")))
    }

    /// Inflation factor m = 1 + exp(kappa + l), with the decay curve held
    /// flat past the horizon and at the yse = 1 value for new entrants.
    pub fn m(&self, svy: i32, yse: i32) -> Result<f64> {
        let idx = self.svy_index(svy)?;
        Ok(1.0 + (self.kappa[idx] + l_at(&self.l, yse)).exp())
    }
}

/// Decay curve lookup: clamped to [1, 15]; the yse = 0 cell uses the
/// yse = 1 value (the curve is only defined from the first full year).
pub fn l_at<T: Real + Copy>(l: &[T], yse: i32) -> T {
    l[(yse.max(1).min(DECAY_HORIZON as i32) - 1) as usize]
}

/// Partial-year inclusion factor for a yse = 0 cell in survey year `svy`.
pub fn partial_year_factor(svy: i32) -> f64 {
    if svy == 2000 {
        PARTIAL_YEAR_CENSUS_2000
    } else {
        PARTIAL_YEAR_ACS
    }
}

/// Expected surveyed population for one survey year via the dense heap
/// operator: `PartialYear(Heap(j) / m)`. Returns a full-grid-length
/// vector; strata of other years are zero.
pub fn expected_survey_population(
    j: &[f64],
    heap: &HeapOperator,
    uc: &UndercountSchedule,
    inputs: &ModelInputs,
    svy: i32,
) -> Result<Vec<f64>> {
    let grid = &inputs.grid;
    if j.len() != grid.len() {
        return Err(Error::domain("population vector length != grid size"));
    }
    if !(2000..=2016).contains(&svy) {
        return Err(Error::domain(format!("{svy} has no survey")));
    }
    let range = grid
        .year_range(svy)
        .ok_or_else(|| Error::domain(format!("{svy} not in grid")))?;
    let n_ages = (AGE_TOP + 1) as usize;
    let rows = heap.yoe_rows.len();
    let cols = heap.yoe_cols.len();

    // Load the true lattice [true yoe][true age].
    let mut lattice = vec![0.0; rows * n_ages];
    for off in range.clone() {
        let key = grid.key(off);
        let r = heap
            .yoe_rows
            .iter()
            .position(|&y| y == key.yoe)
            .ok_or_else(|| Error::domain("heap operator built for a different year"))?;
        lattice[r * n_ages + key.age as usize] = j[off];
    }

    // Age-axis reallocation within each entry-year row.
    let mut by_age = vec![0.0; rows * n_ages];
    for r in 0..rows {
        for (src, &mass) in lattice[r * n_ages..(r + 1) * n_ages].iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for dst in 0..n_ages {
                let f = heap.age_matrix[src * n_ages + dst];
                if f != 0.0 {
                    by_age[r * n_ages + dst] += mass * f;
                }
            }
        }
    }

    // Entry-year-axis reallocation within each reported-age column.
    let mut reported = vec![0.0; cols * n_ages];
    for src in 0..rows {
        for dst in 0..cols {
            let f = heap.yoe_matrix[src * cols + dst];
            if f == 0.0 {
                continue;
            }
            for age in 0..n_ages {
                reported[dst * n_ages + age] += by_age[src * n_ages + age] * f;
            }
        }
    }

    // Undercount division and partial-year factor, read out over valid
    // grid cells; mass in illogical reported cells is unobserved.
    let mut out = vec![0.0; grid.len()];
    for (ci, &yoe) in heap.yoe_cols.iter().enumerate() {
        if yoe > svy {
            continue;
        }
        let yse = svy - yoe;
        let m = uc.m(svy, yse)?;
        let py = if yse == 0 { partial_year_factor(svy) } else { 1.0 };
        for age in 0..n_ages {
            let v = reported[ci * n_ages + age];
            if v == 0.0 {
                continue;
            }
            let key = StratumKey {
                cyr: svy,
                age: age as i32,
                yoe,
            };
            if let Some(off) = grid.offset(&key) {
                out[off] = v / m * py;
            }
        }
    }
    Ok(out)
}

/// Population-weighted mean undercount rate over the calibration period
/// when `offset` is added to the kappa terms of those years.
fn mean_undercount(
    uc: &UndercountSchedule,
    weights: &[(usize, i32, f64)], // (survey index, yse, weight)
    offset: f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(si, yse, w) in weights {
        let x = uc.kappa[si] + offset + l_at(&uc.l, yse);
        // undercount rate 1 - 1/m = sigmoid(x)
        let rate = 1.0 / (1.0 + (-x).exp());
        num += w * rate;
        den += w;
    }
    num / den
}

/// Group the calibration-period population by (survey year, yse).
pub fn calibration_weights(
    inputs: &ModelInputs,
    uc: &UndercountSchedule,
    j: &[f64],
) -> Result<Vec<(usize, i32, f64)>> {
    let (p0, p1) = uc.targets.period;
    let grid = &inputs.grid;
    let mut weights: std::collections::HashMap<(usize, i32), f64> = std::collections::HashMap::new();
    let mut seen = false;
    for (si, &svy) in uc.survey_years.iter().enumerate() {
        if !(p0..=p1).contains(&svy) {
            continue;
        }
        let range = grid
            .year_range(svy)
            .ok_or_else(|| Error::domain(format!("{svy} not in grid")))?;
        seen = true;
        for off in range {
            let key = grid.key(off);
            *weights.entry((si, key.yse())).or_insert(0.0) += j[off];
        }
    }
    if !seen {
        return Err(Error::domain(format!(
            "no survey years inside the calibration period {p0}-{p1}"
        )));
    }
    let mut out: Vec<(usize, i32, f64)> = weights
        .into_iter()
        .map(|((si, yse), w)| (si, yse, w))
        .collect();
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    Ok(out)
}

/// Scalar offset added to the calibration-period kappa terms so that the
/// population-weighted mean undercount equals the region's target.
pub fn calibrate_undercount(
    uc: &UndercountSchedule,
    j: &[f64],
    inputs: &ModelInputs,
    region: Region,
) -> Result<f64> {
    let target = uc.targets.target(region);
    let weights = calibration_weights(inputs, uc, j)?;
    if weights.iter().map(|w| w.2).sum::<f64>() <= 0.0 {
        return Err(Error::numeric("calibration weights are all zero"));
    }
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    if mean_undercount(uc, &weights, lo) > target || mean_undercount(uc, &weights, hi) < target {
        return Err(Error::numeric(format!(
            "undercount target {target} unreachable within offset bounds"
        )));
    }
    // The mean rate is strictly increasing in the offset: bisection.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_undercount(uc, &weights, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let offset = 0.5 * (lo + hi);
    if (mean_undercount(uc, &weights, offset) - target).abs() > 1e-6 {
        return Err(Error::numeric("undercount calibration did not converge"));
    }
    Ok(offset)
}

/// Undercount decay curve l over yse 1..=15: the decay basis applied to
/// the phi coefficients with the last two tied (no exponentiation; the
/// curve enters m = 1 + exp(kappa + l) additively on the log scale).
pub fn decay_curve<T: Real>(phi: &[T], inputs: &ModelInputs, zero: T) -> Vec<T> {
    let phi_full = [phi[0], phi[1], phi[2], phi[2]];
    (0..DECAY_HORIZON)
        .map(|r| {
            let (s, v) = inputs.decay_basis.sparse_row(r);
            let mut acc = zero;
            for k in 0..CUBIC_ORDER {
                acc = phi_full[s + k].fmaf(v[k], acc);
            }
            acc
        })
        .collect()
}

/// All per-evaluation observation structure on the generic scalar.
#[derive(Debug, Clone)]
pub struct Observation<T> {
    pub age: AxisHeap<T>,
    pub yoe: AxisHeap<T>,
    /// Decay values for yse 1..=15.
    pub l: Vec<T>,
    /// Effective per-survey-year kappa (calibration offset included).
    pub kappa_eff: Vec<T>,
}

impl<T: Real> Observation<T> {
    pub fn build(params: &Params<T>, inputs: &ModelInputs, kappa_eff: Vec<T>) -> Result<Self> {
        let zero = params.lambda.lift(0.0);
        let l = decay_curve(&params.phi, inputs, zero);
        Ok(Observation {
            age: age_heap(params)?,
            yoe: yoe_heap(params, &inputs.entry_years)?,
            l,
            kappa_eff,
        })
    }

    /// Expected surveyed population for one survey year, aligned with the
    /// grid's year slice. `None` marks cells with exactly zero expected
    /// mass (never donated to, logically empty).
    pub fn expected_for_year(
        &self,
        j: &[T],
        inputs: &ModelInputs,
        svy: i32,
    ) -> Result<Vec<Option<T>>> {
        let grid = &inputs.grid;
        let range = grid
            .year_range(svy)
            .ok_or_else(|| Error::domain(format!("{svy} not in grid")))?;
        let si = grid
            .survey_years()
            .iter()
            .position(|&y| y == svy)
            .ok_or_else(|| Error::domain(format!("{svy} has no survey")))?;
        let n_ages = (AGE_TOP + 1) as usize;
        let year0 = inputs.entry_years[0];
        // Lattice rows: bucket (0) then regular entry years <= svy.
        let n_reg = (svy - year0 + 1) as usize;
        let rows = 1 + n_reg;
        let mut lattice: Vec<Option<T>> = vec![None; rows * n_ages];
        for off in range.clone() {
            let key = grid.key(off);
            let r = if key.is_pre1950() {
                0
            } else {
                1 + (key.yoe - year0) as usize
            };
            lattice[r * n_ages + key.age as usize] = Some(j[off]);
        }
        let add = |slot: &mut Option<T>, v: T| {
            *slot = Some(match *slot {
                Some(cur) => cur + v,
                None => v,
            });
        };

        // Age axis within every row (bucket included).
        let mut by_age: Vec<Option<T>> = vec![None; rows * n_ages];
        for r in 0..rows {
            for src in 0..n_ages {
                if let Some(mass) = lattice[r * n_ages + src] {
                    add(&mut by_age[r * n_ages + src], mass * self.age.keep[src]);
                }
            }
            for &(src, dst, z) in &self.age.moves {
                if let Some(mass) = lattice[r * n_ages + src] {
                    add(&mut by_age[r * n_ages + dst], mass * z);
                }
            }
        }

        // Entry-year axis within every reported-age column; donations to
        // years beyond the survey year vanish from the lattice.
        let mut reported: Vec<Option<T>> = vec![None; rows * n_ages];
        for age in 0..n_ages {
            if let Some(mass) = by_age[age] {
                add(&mut reported[age], mass); // bucket row untouched
            }
            for ri in 0..n_reg {
                let r = 1 + ri;
                if let Some(mass) = by_age[r * n_ages + age] {
                    add(&mut reported[r * n_ages + age], mass * self.yoe.keep[ri]);
                }
            }
            for &(src, dst, z) in &self.yoe.moves {
                if src >= n_reg || dst >= n_reg {
                    continue;
                }
                if let Some(mass) = by_age[(1 + src) * n_ages + age] {
                    add(&mut reported[(1 + dst) * n_ages + age], mass * z);
                }
            }
        }

        // Undercount and partial-year factors, one divisor per yse group.
        let mut out: Vec<Option<T>> = vec![None; range.len()];
        for r in 0..rows {
            let yoe = if r == 0 {
                ENTRY_BOTTOM
            } else {
                year0 + (r - 1) as i32
            };
            let yse = svy - yoe;
            let m = (self.kappa_eff[si] + l_at(&self.l, yse)).exp().addf(1.0);
            let py = if yse == 0 { partial_year_factor(svy) } else { 1.0 };
            let factor = m.fdiv(py);
            for age in 0..n_ages {
                if let Some(mass) = reported[r * n_ages + age] {
                    let key = StratumKey {
                        cyr: svy,
                        age: age as i32,
                        yoe,
                    };
                    if let Some(off) = grid.offset(&key) {
                        out[off - range.start] = Some(mass * factor);
                    }
                }
            }
        }
        Ok(out)
    }
}
