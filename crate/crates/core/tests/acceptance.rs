//! Acceptance battery: ten end-to-end checks of the estimator, each
//! printing a single PASS/FAIL line (visible with `--nocapture`).
//!
//! The numbered criteria cover gradient correctness, oracle equivalences
//! for the structural operators, prior constants, undercount calibration,
//! partial-year factors, synthetic parameter recovery, hold-out
//! validation, heaping identification, determinism, and output schemas.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::time::Instant;

use stockflow::cohort::{
    cumulative_exit, emigration_rate, mortality_rate, true_population, ModelInputs,
    ParameterSet,
};
use stockflow::data_io::{
    write_draws_csv, write_immigration_outputs, write_population_outputs, OriginSummary,
};
use stockflow::inference::{quantile, PosteriorDraws, SamplerConfig};
use stockflow::lifetable::LifeTable;
use stockflow::observation::{
    build_heap_operator, calibrate_undercount, calibration_weights,
    expected_survey_population, l_at, partial_year_factor, UndercountSchedule, ZETA_MAX,
};
use stockflow::probability::{ParamLayout, PosteriorModel, Z95};
use stockflow::splines::{second_difference, tensor_surface, DifferencePenalty};
use stockflow::strata::{GridSpec, StrataGrid, AGE_TOP};
use stockflow::validation::{holdout_validate, simulate_survey, SyntheticSpec};

fn report(criterion: u32, label: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({label}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({label}) failed: {detail}");
}

/// Desk-scale synthetic setup whose generating undercount already sits at
/// the calibration target, so the model's internal calibration is
/// consistent with the generating process.
fn calibrated_desk_spec(seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::desk_scale(seed).unwrap();
    apply_calibration_offset(&mut spec);
    spec
}

fn apply_calibration_offset(spec: &mut SyntheticSpec) {
    let j = true_population(&spec.params, &spec.inputs).unwrap();
    let uc = UndercountSchedule::from_params(&spec.params, &spec.inputs).unwrap();
    let off = calibrate_undercount(&uc, &j, &spec.inputs, spec.region).unwrap();
    let (p0, p1) = uc.targets.period;
    for (i, &svy) in spec.inputs.grid.survey_years().iter().enumerate() {
        if (p0..=p1).contains(&svy) {
            spec.params.kappa[i] += off;
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let spec = calibrated_desk_spec(101);
    let data = simulate_survey(&spec).unwrap();
    // Probe around the generating parameters: there the log density is of
    // moderate magnitude, so central differences resolve the gradient.
    let layout = ParamLayout::for_inputs(&spec.inputs);
    let base = layout.unconstrain(&spec.params).unwrap();
    let model = PosteriorModel::new(spec.inputs, data).unwrap();
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0.0f64, 0.0f64);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 20 {
        attempts += 1;
        assert!(attempts <= 200, "could not find 20 evaluable random points");
        let x: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
        let res = model.value_and_grad(&x);
        if res.rejected {
            // Points outside the evaluable region (for example where the
            // undercount calibration target is unreachable) are resampled.
            continue;
        }
        accepted += 1;
        // Probe five random coordinates per point with central differences.
        for _ in 0..5 {
            let i = rng.gen_range(0..dim);
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (model.value(&hi) - model.value(&lo)) / (2.0 * h);
            let rel =
                (res.gradient[i] - fd).abs() / fd.abs().max(res.gradient[i].abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, res.gradient[i], fd);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient vs central differences",
        max_rel < 1e-5 && secs < 60.0,
        &format!(
            "max relative error {max_rel:.2e} over 20 points, {secs:.1}s \
             (worst coord {} ad {} fd {})",
            worst.0, worst.1, worst.2
        ),
    );
}

#[test]
fn criterion_02_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);

    // (a) cumulative exit vs an independent survival-product oracle on
    // 1000 random strata of the full grid (pre-1950 bucket included).
    let spec = GridSpec::full((2000..=2016).collect(), vec![]);
    let grid = StrataGrid::enumerate(&spec).unwrap();
    let inputs = ModelInputs::new(grid, LifeTable::default_2012()).unwrap();
    let mut params = ParameterSet::prior_means(&inputs);
    for d in params.delta.iter_mut() {
        *d += rng.gen_range(-0.2..0.2);
    }
    params.theta = -0.013 + rng.gen_range(-0.002..0.002);
    for e in params.eta.iter_mut() {
        *e += rng.gen_range(-0.3..0.3);
    }
    let g = mortality_rate(&params, &inputs).unwrap();
    let h = emigration_rate(&params, &inputs).unwrap();
    let (my0, _) = inputs.mort_year_range;
    let n_years = inputs.n_mort_years();
    let mut max_exit_err = 0.0f64;
    let mut sampled = 0usize;
    while sampled < 1000 {
        let key = inputs.grid.keys()[rng.gen_range(0..inputs.grid.len())];
        // Bucket cells implying birth after the bottom-code year carry no
        // population and have no exit path; skip them.
        if key.is_pre1950() && key.age - (key.cyr - my0) < 0 {
            continue;
        }
        sampled += 1;
        let got = cumulative_exit(&g, &h, &key, &inputs).unwrap();
        // Oracle: survive each year independently; exit = 1 - product.
        let mut surv = 1.0f64;
        let yse = key.yse();
        let (a0, y0) = if key.is_pre1950() {
            (key.age - (key.cyr - (my0)), stockflow::ENTRY_BOTTOM)
        } else {
            (key.aoe().unwrap(), key.yoe)
        };
        for t in 0..yse {
            if t >= 1 {
                surv *= (-stockflow::cohort::emigration_at(&h, t as usize)).exp();
            }
            let y = y0 + t;
            if y >= my0 {
                let age = if key.is_pre1950() {
                    (a0 + (y - my0)).min(AGE_TOP)
                } else {
                    (a0 + t).min(AGE_TOP)
                } as usize;
                surv *= (-g[age * n_years + (y - my0) as usize]).exp();
            }
        }
        max_exit_err = max_exit_err.max((got - (1.0 - surv)).abs());
    }

    // (b) tensor surface vs a plain double loop.
    let (ba, bb) = (&inputs.age_basis, &inputs.yoe_basis);
    let coef: Vec<f64> = (0..ba.n_basis * bb.n_basis)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let fast = tensor_surface(ba, bb, &coef).unwrap();
    let mut max_tensor_err = 0.0f64;
    for r in 0..ba.n_points() {
        for q in 0..bb.n_points() {
            let mut acc = 0.0;
            for i in 0..ba.n_basis {
                for jj in 0..bb.n_basis {
                    acc += ba.at(r, i) * coef[i * bb.n_basis + jj] * bb.at(q, jj);
                }
            }
            max_tensor_err = max_tensor_err.max((fast[r * bb.n_points() + q] - acc).abs());
        }
    }

    // (c) heap operator conserves mass: every row of both reallocation
    // matrices sums to one.
    let mut hp = ParameterSet::prior_means(&inputs);
    let zjit = |rng: &mut ChaCha8Rng| rng.gen_range(0.01..ZETA_MAX - 0.01);
    for z in hp
        .zeta_yoe10
        .iter_mut()
        .chain(&mut hp.zeta_yoe5)
        .chain(&mut hp.zeta_age10)
        .chain(&mut hp.zeta_age5)
    {
        *z = zjit(&mut rng);
    }
    let mut max_row_err = 0.0f64;
    for svy in [2000, 2008, 2016] {
        let op = build_heap_operator(&hp, &inputs, svy).unwrap();
        let n_ages = (AGE_TOP + 1) as usize;
        for r in 0..n_ages {
            let s: f64 = op.age_matrix[r * n_ages..(r + 1) * n_ages].iter().sum();
            max_row_err = max_row_err.max((s - 1.0).abs());
        }
        let cols = op.yoe_cols.len();
        for r in 0..op.yoe_rows.len() {
            let s: f64 = op.yoe_matrix[r * cols..(r + 1) * cols].iter().sum();
            max_row_err = max_row_err.max((s - 1.0).abs());
        }
    }

    // (d) second-difference operator vs the matrix penalty, exactly.
    let coef: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let by_loop = second_difference(&coef).unwrap();
    let by_matrix = DifferencePenalty::new(2, coef.len())
        .unwrap()
        .apply(&coef)
        .unwrap();
    // The paper operator is the negated second difference row pattern
    // (-1, 2, -1); direct comparison, bit for bit.
    let exact = by_loop == by_matrix;

    let pass = max_exit_err < 1e-12 && max_tensor_err < 1e-12 && max_row_err < 1e-9 && exact;
    report(
        2,
        "structural operator oracles",
        pass,
        &format!(
            "exit {max_exit_err:.1e}, tensor {max_tensor_err:.1e}, heap rows {max_row_err:.1e}, \
             second-difference exact: {exact}"
        ),
    );
}

#[test]
fn criterion_03_prior_constants() {
    // Initial-stock prior: equal-tailed 95% interval of exp(alpha_1949)
    // under Normal(0, 10), to two significant figures.
    let lo = (-Z95 * 10.0f64).exp();
    let hi = (Z95 * 10.0f64).exp();
    let lo_s = format!("{lo:.1e}");
    let hi_s = format!("{hi:.1e}");
    let interval_ok = lo_s == "3.1e-9" && hi_s == "3.3e8";

    // Top-age adjustment prior: Monte Carlo mean of exp(rho).
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let dist = Normal::<f64>::new(1.38, 0.25).unwrap();
    let n = 400_000;
    let mean: f64 = (0..n).map(|_| dist.sample(&mut rng).exp()).sum::<f64>() / n as f64;
    let rho_ok = (mean - 4.1).abs() < 0.05;

    // Observation-rate prior: Gamma(5, 5), whose mean shape/rate is
    // exactly one; confirm against a Monte Carlo draw of the same law.
    let lambda_mean = 5.0f64 / 5.0f64;
    let gamma = rand_distr::Gamma::<f64>::new(5.0, 1.0 / 5.0).unwrap();
    let mc: f64 = (0..n).map(|_| gamma.sample(&mut rng)).sum::<f64>() / n as f64;
    let lambda_ok = lambda_mean == 1.0 && (mc - 1.0).abs() < 0.01;

    report(
        3,
        "prior constants",
        interval_ok && rho_ok && lambda_ok,
        &format!(
            "exp(initial stock) interval [{lo_s}, {hi_s}], mean exp(rho) {mean:.3}, \
             lambda prior mean {lambda_mean}"
        ),
    );
}

#[test]
fn criterion_04_undercount_calibration() {
    use stockflow::observation::Region;
    let spec = SyntheticSpec::desk_scale(44).unwrap();
    let j = true_population(&spec.params, &spec.inputs).unwrap();
    let uc = UndercountSchedule::from_params(&spec.params, &spec.inputs).unwrap();
    let weights = calibration_weights(&spec.inputs, &uc, &j).unwrap();
    let mean_rate = |offset: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for &(si, yse, w) in &weights {
            let x = uc.kappa[si] + offset + l_at(&uc.l, yse);
            num += w / (1.0 + (-x).exp());
            den += w;
        }
        num / den
    };
    let mut detail = String::new();
    let mut pass = true;
    for (region, target) in [
        (Region::LatinAmericaCaribbean, 0.050f64),
        (Region::Other, 0.020f64),
    ] {
        let off = calibrate_undercount(&uc, &j, &spec.inputs, region).unwrap();
        let achieved = mean_rate(off);
        pass &= (achieved - target).abs() < 1e-6;
        detail.push_str(&format!("{region:?}: {achieved:.7} vs {target}; "));
    }
    report(4, "undercount calibration targets", pass, detail.trim_end());
}

#[test]
fn criterion_05_partial_year_factors() {
    let spec = SyntheticSpec::desk_scale(55).unwrap();
    let inputs = &spec.inputs;
    let j = true_population(&spec.params, inputs).unwrap();
    let uc = UndercountSchedule::from_params(&spec.params, inputs).unwrap();
    let n_ages = (AGE_TOP + 1) as usize;
    let mut pass = true;
    let mut checked = 0usize;
    for &svy in inputs.grid.survey_years() {
        let heap = build_heap_operator(&spec.params, inputs, svy).unwrap();
        let jhat = expected_survey_population(&j, &heap, &uc, inputs, svy).unwrap();

        // Independent replication of the reallocation, stopping before
        // the partial-year step: lattice -> age axis -> entry-year axis,
        // then the undercount division.
        let rows = heap.yoe_rows.len();
        let cols = heap.yoe_cols.len();
        let mut lattice = vec![0.0; rows * n_ages];
        for off in inputs.grid.year_range(svy).unwrap() {
            let key = inputs.grid.key(off);
            let r = heap.yoe_rows.iter().position(|&y| y == key.yoe).unwrap();
            lattice[r * n_ages + key.age as usize] = j[off];
        }
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

        // Every yse = 0 cell: production jhat over Heap(j)/m must be the
        // inclusion factor exactly.
        let expect = partial_year_factor(svy);
        let ci = heap.yoe_cols.iter().position(|&y| y == svy).unwrap();
        let m = uc.m(svy, 0).unwrap();
        for age in 0..n_ages {
            let v = reported[ci * n_ages + age];
            if v == 0.0 {
                continue;
            }
            let key = stockflow::StratumKey {
                cyr: svy,
                age: age as i32,
                yoe: svy,
            };
            let off = inputs.grid.offset(&key).unwrap();
            let ratio = jhat[off] / (v / m);
            if ratio != expect {
                pass = false;
            }
            checked += 1;
        }
        assert!(
            expect == if svy == 2000 { 0.25 } else { 0.5 },
            "factor table wrong for {svy}"
        );
    }
    report(
        5,
        "partial-year inclusion factors",
        pass && checked > 1000,
        &format!("{checked} new-entrant cells, ratios exactly 0.25 (2000) / 0.5 (2001-2016)"),
    );
}

/// Criteria 6 and 8 share one desk-scale fit (4 chains x 500+500 at
/// target acceptance 0.9), the long pole of the battery.
#[test]
fn criterion_06_recovery_and_08_heaping() {
    let start = Instant::now();
    let spec = calibrated_desk_spec(4242);
    let data = simulate_survey(&spec).unwrap();
    let truth = true_population(&spec.params, &spec.inputs).unwrap();
    let grid = spec.inputs.grid.clone();
    let model = PosteriorModel::new(spec.inputs.clone(), data).unwrap();
    let config = SamplerConfig {
        chains: 4,
        warmup: 500,
        samples: 500,
        target_accept: 0.9,
        max_tree_depth: 6,
        seed: 20_240_901,
        init_jitter: 0.1,
    };
    let init = model.initial_point();
    let (chains, stats) = stockflow::inference::sample(&model, &init, &config).unwrap();
    let draws = PosteriorDraws::new(chains).unwrap();

    let divergences: usize = stats.iter().map(|s| s.divergences).sum();
    let mut rhat_ok = 0usize;
    let mut max_rhat = 0.0f64;
    for coord in 0..model.dim() {
        let d = draws.diagnostics(coord);
        if !d.rhat.is_finite() || d.rhat <= 1.05 {
            rhat_ok += 1;
        }
        if d.rhat.is_finite() {
            max_rhat = max_rhat.max(d.rhat);
        }
    }
    let frac_rhat = rhat_ok as f64 / model.dim() as f64;

    // Per-draw derived quantities: yearly population totals, immigration
    // path, and the heaped-decade fraction.
    let years: Vec<i32> = grid.survey_years().to_vec();
    let n_total = draws.n_total();
    let mut year_totals: Vec<Vec<f64>> = vec![Vec::with_capacity(n_total); years.len()];
    let n_yoe = spec.inputs.entry_years.len();
    let mut imm_sum = vec![0.0f64; n_yoe];
    let mut zeta_sum = 0.0f64;
    let layout = ParamLayout::for_inputs(&spec.inputs);
    for x in draws.iter() {
        let pred = model.predict(x).unwrap();
        for (yi, &year) in years.iter().enumerate() {
            let total: f64 = grid
                .year_range(year)
                .unwrap()
                .map(|off| pred.true_population[off])
                .sum();
            year_totals[yi].push(total);
        }
        for (i, v) in pred.immigration.iter().enumerate() {
            imm_sum[i] += v;
        }
        let (p, _) = layout.constrain::<f64>(x).unwrap();
        zeta_sum += p.zeta_yoe10[4];
    }

    let mut covered = 0usize;
    for (yi, &year) in years.iter().enumerate() {
        let t: f64 = grid
            .year_range(year)
            .unwrap()
            .map(|off| truth[off])
            .sum();
        let lo = quantile(&year_totals[yi], 0.025);
        let hi = quantile(&year_totals[yi], 0.975);
        if (lo..=hi).contains(&t) {
            covered += 1;
        }
    }
    let coverage = covered as f64 / years.len() as f64;

    let imm_mean: Vec<f64> = imm_sum.iter().map(|v| v / n_total as f64).collect();
    let imm_truth: Vec<f64> = spec.params.alpha.iter().map(|a| a.exp()).collect();
    let corr = pearson(&imm_mean, &imm_truth);

    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass6 = coverage >= 0.90
        && corr > 0.9
        && divergences == 0
        && frac_rhat >= 0.95
        && minutes <= 45.0;
    report(
        6,
        "desk-scale synthetic recovery",
        pass6,
        &format!(
            "yearly-total coverage {coverage:.2}, immigration corr {corr:.3}, \
             divergences {divergences}, R-hat<=1.05 for {frac_rhat:.3} of params \
             (max {max_rhat:.3}), {minutes:.1} min"
        ),
    );

    let zeta_mean = zeta_sum / n_total as f64;
    report(
        8,
        "decade-heap identification",
        (zeta_mean - 0.2).abs() <= 0.05,
        &format!("posterior mean heaped fraction {zeta_mean:.3} vs generating 0.2"),
    );
}

#[test]
fn criterion_07_holdout_validation() {
    // Reduced grid keeps the refit to a few minutes while leaving about
    // fifteen hundred held-out strata to score.
    let gspec = GridSpec {
        survey_years: (2006..=2016).collect(),
        projection_years: vec![],
        entry_year_min: 1996,
        include_pre1950: false,
    };
    let grid = StrataGrid::enumerate(&gspec).unwrap();
    let inputs = ModelInputs::new(grid, LifeTable::default_2012()).unwrap();
    let mut params = ParameterSet::prior_means(&inputs);
    let n_yoe = inputs.entry_years.len();
    for (i, a) in params.alpha.iter_mut().enumerate() {
        *a = 11.8 + 0.9 * (3.0 * i as f64 / (n_yoe - 1) as f64).tanh();
    }
    params.alpha0 = 11.0;
    params.theta = -0.0131;
    params.sigma_y = 30.0;
    params.zeta_yoe10[4] = 0.2;
    params.kappa.iter_mut().for_each(|k| *k = -2.5);
    let n_svy = inputs.grid.survey_years().len();
    let mut spec = SyntheticSpec {
        params,
        inputs: inputs.clone(),
        seed: 777,
        inverse_weight: 0.01,
        sample_sizes: vec![60_000.0; n_svy],
        region: stockflow::observation::Region::Other,
    };
    apply_calibration_offset(&mut spec);
    let data = simulate_survey(&spec).unwrap();
    // Correctly specified survey noise: the generating scale.
    let se = vec![spec.params.sigma_y; inputs.grid.len()];
    let config = SamplerConfig {
        chains: 2,
        warmup: 500,
        samples: 400,
        target_accept: 0.9,
        max_tree_depth: 7,
        seed: 555,
        init_jitter: 0.1,
    };
    let report_v = holdout_validate(&inputs, &data, 2011, &se, &config).unwrap();
    let cal_dev = report_v
        .calibration
        .iter()
        .map(|b| (b.frequency - b.mean_p).abs())
        .fold(0.0f64, f64::max);
    let pass = (0.8..=1.25).contains(&report_v.residual_sd)
        && (0.90..=0.99).contains(&report_v.coverage)
        && cal_dev < 0.1
        && report_v.valid;
    report(
        7,
        "hold-out validation",
        pass,
        &format!(
            "residual SD {:.3}, coverage {:.3}, max zero-calibration deviation {cal_dev:.3}, \
             refit valid {} (max R-hat {:.3}, divergences {}); {}",
            report_v.residual_sd,
            report_v.coverage,
            report_v.valid,
            report_v.max_rhat,
            report_v.divergences,
            report_v.context
        ),
    );
}

#[test]
fn criterion_09_seed_determinism() {
    let gspec = GridSpec {
        survey_years: (2012..=2014).collect(),
        projection_years: vec![],
        entry_year_min: 2008,
        include_pre1950: false,
    };
    let run = |dir: &std::path::Path| {
        let grid = StrataGrid::enumerate(&gspec).unwrap();
        let inputs = ModelInputs::new(grid.clone(), LifeTable::default_2012()).unwrap();
        let mut params = ParameterSet::prior_means(&inputs);
        params.alpha.iter_mut().for_each(|a| *a = 11.5);
        params.kappa.iter_mut().for_each(|k| *k = -2.5);
        params.sigma_y = 30.0;
        let n_svy = inputs.grid.survey_years().len();
        let mut spec = SyntheticSpec {
            params,
            inputs: inputs.clone(),
            seed: 909,
            inverse_weight: 0.01,
            sample_sizes: vec![60_000.0; n_svy],
            region: stockflow::observation::Region::Other,
        };
        apply_calibration_offset(&mut spec);
        let data = simulate_survey(&spec).unwrap();
        let model = PosteriorModel::new(inputs.clone(), data).unwrap();
        let config = SamplerConfig {
            chains: 2,
            warmup: 60,
            samples: 40,
            target_accept: 0.8,
            max_tree_depth: 6,
            seed: 1234,
            init_jitter: 0.1,
        };
        let init = model.initial_point();
        let (chains, _) = stockflow::inference::sample(&model, &init, &config).unwrap();
        write_draws_csv(&dir.join("draws.csv"), &chains).unwrap();
        let draws = PosteriorDraws::new(chains).unwrap();
        let mut pop: Vec<Vec<f64>> = Vec::new();
        let mut imm: Vec<Vec<f64>> = Vec::new();
        for x in draws.iter() {
            let pred = model.predict(x).unwrap();
            pop.push(pred.true_population);
            imm.push(pred.immigration);
        }
        let summarize = |cols: &[Vec<f64>], i: usize| {
            let v: Vec<f64> = cols.iter().map(|row| row[i]).collect();
            let r = stockflow::inference::summarize_draws(&v);
            (r.mean, r.lo95, r.hi95)
        };
        let summary = OriginSummary {
            origin: "ALL".to_string(),
            population: (0..grid.len()).map(|i| summarize(&pop, i)).collect(),
            immigration: (0..imm[0].len()).map(|i| summarize(&imm, i)).collect(),
            immigration_start: inputs.entry_years[0],
        };
        write_population_outputs(dir, "fb_pop_estimates", &grid, &[summary.clone()]).unwrap();
        write_immigration_outputs(dir, "fb_imm_estimates", &[summary]).unwrap();
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(dir_a.path());
    run(dir_b.path());
    let mut pass = true;
    for name in [
        "draws.csv",
        "fb_pop_estimates.csv",
        "fb_pop_estimates_lo95.csv",
        "fb_pop_estimates_hi95.csv",
        "fb_imm_estimates.csv",
        "fb_imm_estimates_lo95.csv",
        "fb_imm_estimates_hi95.csv",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        pass &= a == b;
    }
    report(
        9,
        "seed determinism",
        pass,
        "two independent runs, all draw and estimate files byte-identical",
    );
}

#[test]
fn criterion_10_output_schema() {
    let gspec = GridSpec::full((2000..=2016).collect(), vec![2017, 2018]);
    let grid = StrataGrid::enumerate(&gspec).unwrap();
    let origins = [
        "ALL",
        "WBregion_EAP",
        "WBregion_ECA",
        "WBregion_LAC",
        "WBregion_MENA",
        "WBregion_NAM",
        "WBregion_SAS",
        "WBregion_SSA",
        "CHN",
        "IND",
        "MEX",
    ];
    let summaries: Vec<OriginSummary> = origins
        .iter()
        .map(|&name| OriginSummary {
            origin: name.to_string(),
            population: vec![(1.0, 0.5, 2.0); grid.len()],
            immigration: vec![(3.0, 1.0, 5.0); (2018 - 1950 + 1) as usize],
            immigration_start: 1950,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_population_outputs(dir.path(), "fb_pop_estimates", &grid, &summaries).unwrap();
    write_immigration_outputs(dir.path(), "fb_imm_estimates", &summaries).unwrap();

    let expected_cols = origins.join(",");
    let pop = std::fs::read_to_string(dir.path().join("fb_pop_estimates.csv")).unwrap();
    let pop_header_ok = pop
        .lines()
        .next()
        .unwrap()
        .eq(&format!("survey_year,current_age,entry_year,{expected_cols}"));
    // Projection years appear in the stratum rows.
    let has_projection = pop.lines().any(|l| l.starts_with("2018,"));

    let imm = std::fs::read_to_string(dir.path().join("fb_imm_estimates.csv")).unwrap();
    let mut imm_lines = imm.lines();
    let imm_header_ok = imm_lines.next().unwrap() == format!("entry_year,{expected_cols}");
    let rows: Vec<&str> = imm_lines.collect();
    let span_ok = rows.len() == 69
        && rows.first().unwrap().starts_with("1950,")
        && rows.last().unwrap().starts_with("2018,");

    let mut companions = true;
    for stem in ["fb_pop_estimates", "fb_imm_estimates"] {
        for suffix in ["_lo95", "_hi95"] {
            let p = dir.path().join(format!("{stem}{suffix}.csv"));
            let text = std::fs::read_to_string(&p).unwrap();
            companions &= text.lines().next().unwrap().ends_with(&expected_cols);
        }
    }

    report(
        10,
        "output schemas",
        pop_header_ok && has_projection && imm_header_ok && span_ok && companions,
        &format!(
            "population header ok {pop_header_ok}, projection rows {has_projection}, \
             immigration header ok {imm_header_ok}, rows 1950-2018 {span_ok}, \
             interval companions {companions}"
        ),
    );
}
