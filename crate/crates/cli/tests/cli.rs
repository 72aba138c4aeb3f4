//! End-to-end tests driving the `stockflow` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stockflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Small grid keeping runtimes in seconds: three survey years, seven
/// entry-year cohorts.
const SMALL_GRID: &str = "survey_years = 2012-2014\nentry_year_min = 2008\n";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{SMALL_GRID}{extra}")).unwrap();
    path
}

fn simulate_small(dir: &Path, seed: u64) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = dir.join(format!("sim_{seed}"));
    let res = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    out
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("fit") && text.contains("simulate") && text.contains("validate"));

    // No subcommand is a usage error.
    let none = run(&[]);
    assert_eq!(none.status.code(), Some(1));

    // Missing required settings surface as data errors, not panics.
    let dir = tempfile::tempdir().unwrap();
    let no_data = run(&["fit", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(no_data.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_data.stderr).contains("data"));
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_small(dir.path(), 7);
    let b_dir = tempfile::tempdir().unwrap();
    let b = simulate_small(b_dir.path(), 7);
    assert_eq!(
        read(&a.join("synthetic_data.csv")),
        read(&b.join("synthetic_data.csv")),
        "same seed must reproduce the dataset byte for byte"
    );
    let c = simulate_small(dir.path(), 8);
    assert_ne!(
        read(&a.join("synthetic_data.csv")),
        read(&c.join("synthetic_data.csv")),
        "different seeds should differ"
    );
    // Truth files accompany the data.
    assert!(a.join("synthetic_truth.csv").exists());
    assert!(a.join("synthetic_truth_immigration.csv").exists());
    assert!(a.join("manifest.txt").exists());
}

#[test]
fn simulate_with_zero_rate_yields_empty_survey() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lambda = 0\n");
    let out = dir.path().join("sim0");
    let res = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    // With a zero sampling rate every stratum is unobserved, so only the
    // header remains.
    let data = read(&out.join("synthetic_data.csv"));
    assert_eq!(data.trim(), "survey_year,current_age,entry_year,y,n");
}

fn fit_small(data: &Path, cfg: &Path, out: &Path, seed: u64) -> Output {
    run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])
}

const SMALL_SAMPLER: &str =
    "chains = 2\nwarmup = 60\nsamples = 40\nmax_tree_depth = 6\nregion = other\n";

#[test]
fn fit_writes_outputs_and_repeats_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), 11);
    let data = sim.join("synthetic_data.csv");
    let cfg = write_config(dir.path(), SMALL_SAMPLER);

    let out_a = dir.path().join("fit_a");
    let res_a = fit_small(&data, &cfg, &out_a, 42);
    let code = res_a.status.code();
    assert!(
        code == Some(0) || code == Some(2),
        "fit exited {code:?}: {}",
        String::from_utf8_lossy(&res_a.stderr)
    );

    for stem in ["fb_pop_estimates", "fb_imm_estimates"] {
        for suffix in ["", "_lo95", "_hi95"] {
            let p = out_a.join(format!("{stem}{suffix}.csv"));
            assert!(p.exists(), "missing {}", p.display());
        }
    }
    let pop = read(&out_a.join("fb_pop_estimates.csv"));
    assert!(pop.starts_with("survey_year,current_age,entry_year,ALL\n"));
    let imm = read(&out_a.join("fb_imm_estimates.csv"));
    assert!(imm.starts_with("entry_year,ALL\n"));
    assert!(out_a.join("draws_ALL.csv").exists());
    assert!(out_a.join("diagnostics_ALL.txt").exists());
    assert!(out_a.join("manifest.txt").exists());

    // Same seed, separate process: every estimate file must match exactly.
    let out_b = dir.path().join("fit_b");
    let res_b = fit_small(&data, &cfg, &out_b, 42);
    assert_eq!(res_a.status.code(), res_b.status.code());
    for name in [
        "fb_pop_estimates.csv",
        "fb_pop_estimates_lo95.csv",
        "fb_pop_estimates_hi95.csv",
        "fb_imm_estimates.csv",
        "draws_ALL.csv",
    ] {
        assert_eq!(
            read(&out_a.join(name)),
            read(&out_b.join(name)),
            "{name} differs between identical runs"
        );
    }

    // A different seed changes the draws.
    let out_c = dir.path().join("fit_c");
    fit_small(&data, &cfg, &out_c, 43);
    assert_ne!(read(&out_a.join("draws_ALL.csv")), read(&out_c.join("draws_ALL.csv")));
}

#[test]
fn fit_reports_diagnostic_failure_via_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), 21);
    let data = sim.join("synthetic_data.csv");
    // An unattainable convergence threshold forces the failure path.
    let cfg = write_config(
        dir.path(),
        "chains = 2\nwarmup = 20\nsamples = 10\nmax_tree_depth = 5\nregion = other\nrhat_threshold = 0.0\n",
    );
    let out = dir.path().join("fit_fail");
    let res = fit_small(&data, &cfg, &out, 5);
    assert_eq!(
        res.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let manifest = read(&out.join("manifest.txt"));
    assert!(manifest.contains("diagnostics_passed = false"));
}

#[test]
fn validate_rejects_holdout_year_outside_grid() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), 31);
    let cfg = write_config(dir.path(), "region = other\n");
    let out = dir.path().join("val");
    let res = run(&[
        "validate",
        "--data",
        sim.join("synthetic_data.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--holdout-year",
        "1999",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("1999"));
}

#[test]
fn fit_microdata_with_two_origins_emits_both_column_sets() {
    let dir = tempfile::tempdir().unwrap();
    // Hand-built microdata inside the small grid: ages consistent with
    // each entry year, two origin countries.
    let mut csv = String::from(
        "survey_year,country_code,reported_age,reported_entry_year,analysis_weight\n",
    );
    for svy in 2012..=2014 {
        for yoe in 2008..=svy {
            for age in (svy - yoe)..(svy - yoe + 40) {
                csv.push_str(&format!("{svy},MEX,{age},{yoe},100\n"));
                if age % 2 == 0 {
                    csv.push_str(&format!("{svy},CHN,{age},{yoe},80\n"));
                }
            }
        }
    }
    let data = dir.path().join("micro.csv");
    std::fs::write(&data, csv).unwrap();
    let cfg = write_config(
        dir.path(),
        "chains = 1\nwarmup = 25\nsamples = 10\nmax_tree_depth = 5\n",
    );
    let out = dir.path().join("fit_micro");
    let res = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--origin",
        "MEX,CHN",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    let code = res.status.code();
    assert!(
        code == Some(0) || code == Some(2),
        "fit exited {code:?}: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    // ISO3 columns appear alphabetically after the stratum keys.
    let pop = read(&out.join("fb_pop_estimates.csv"));
    assert!(pop.starts_with("survey_year,current_age,entry_year,CHN,MEX\n"));
    let imm = read(&out.join("fb_imm_estimates.csv"));
    assert!(imm.starts_with("entry_year,CHN,MEX\n"));
    assert!(out.join("draws_MEX.csv").exists());
    assert!(out.join("draws_CHN.csv").exists());
}
