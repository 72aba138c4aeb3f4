//! Command implementations and configuration plumbing.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stockflow::cohort::ModelInputs;
use stockflow::data_io::{
    aggregate, parse_config, read_microdata_csv, read_strata_csv,
    write_draws_csv, write_immigration_outputs, write_key_values, write_population_outputs,
    write_strata_csv, OriginMap, OriginSelection, OriginSummary,
};
use stockflow::inference::{sample, summarize_draws, PosteriorDraws, SamplerConfig};
use stockflow::lifetable::LifeTable;
use stockflow::observation::Region;
use stockflow::probability::PosteriorModel;
use stockflow::strata::{GridSpec, StrataGrid};
use stockflow::validation::{holdout_validate, simulate_survey_with_truth, SyntheticSpec};
use stockflow::{Error, Result};

/// Exit code for a run whose sampler diagnostics failed.
const EXIT_DIAGNOSTIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "stockflow",
    about = "Estimate disaggregated foreign-born population stocks and immigration flows",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonFlags {
    /// Input data file (microdata or pre-aggregated strata CSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Origin selection: ALL, a WBregion_* name, an ISO3 code, or a
    /// comma-separated list for multiple independent fits.
    #[arg(long)]
    pub origin: Option<String>,
    /// Root RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sampler chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model and write population/immigration estimates.
    Fit {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Generate a synthetic survey dataset with known truth.
    Simulate {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Hold out one survey year, refit, and score predictions on it.
    Validate {
        #[command(flatten)]
        common: CommonFlags,
        /// Survey year to hold out.
        #[arg(long = "holdout-year")]
        holdout_year: Option<i32>,
    },
}

/// Resolved settings: config file values with flag overrides applied.
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(common: &CommonFlags) -> Result<Self> {
        let mut map = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::data(format!("config {}: {e}", path.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        if let Some(v) = &common.data {
            map.insert("data".into(), v.display().to_string());
        }
        if let Some(v) = &common.origin {
            map.insert("origin".into(), v.clone());
        }
        if let Some(v) = common.seed {
            map.insert("seed".into(), v.to_string());
        }
        if let Some(v) = common.chains {
            map.insert("chains".into(), v.to_string());
        }
        if let Some(v) = &common.out {
            map.insert("out".into(), v.display().to_string());
        }
        Ok(Settings { map })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::data(format!("config key {key}: cannot parse '{s}'"))),
        }
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::data(format!("missing required setting '{key}'")))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.require("out")?);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn grid_spec(&self) -> Result<GridSpec> {
        let survey = parse_year_range(self.get("survey_years").unwrap_or("2000-2016"))?;
        let projection = match self.get("projection_years").unwrap_or("none") {
            "none" | "" => vec![],
            s => parse_year_range(s)?,
        };
        Ok(GridSpec {
            survey_years: survey,
            projection_years: projection,
            entry_year_min: self.parse("entry_year_min", 1980)?,
            include_pre1950: self.parse("include_pre1950", false)?,
        })
    }

    fn sampler_config(&self) -> Result<SamplerConfig> {
        let d = SamplerConfig::default();
        Ok(SamplerConfig {
            chains: self.parse("chains", d.chains)?,
            warmup: self.parse("warmup", d.warmup)?,
            samples: self.parse("samples", d.samples)?,
            target_accept: self.parse("target_accept", d.target_accept)?,
            max_tree_depth: self.parse("max_tree_depth", d.max_tree_depth)?,
            seed: self.parse("seed", d.seed)?,
            init_jitter: self.parse("init_jitter", d.init_jitter)?,
        })
    }

    fn life_table(&self) -> Result<LifeTable> {
        match self.get("life_table") {
            Some(p) => LifeTable::from_csv(Path::new(p)),
            None => Ok(LifeTable::default_2012()),
        }
    }

    /// Manifest lines reproducing this run.
    fn manifest(&self, extra: &[(String, String)]) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = vec![(
            "schema_version".to_string(),
            "1".to_string(),
        )];
        for (k, v) in &self.map {
            pairs.push((format!("config.{k}"), v.clone()));
        }
        pairs.extend(extra.iter().cloned());
        pairs
    }
}

fn parse_year_range(s: &str) -> Result<Vec<i32>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('-') {
        let a: i32 = a
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad year range '{s}'")))?;
        let b: i32 = b
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad year range '{s}'")))?;
        if b < a {
            return Err(Error::data(format!("bad year range '{s}'")));
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::data(format!("bad year list '{s}'")))
        })
        .collect()
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Fit { common } => cmd_fit(&Settings::resolve(&common)?),
        Command::Simulate { common } => cmd_simulate(&Settings::resolve(&common)?),
        Command::Validate {
            common,
            holdout_year,
        } => {
            let mut settings = Settings::resolve(&common)?;
            if let Some(y) = holdout_year {
                settings.map.insert("holdout_year".into(), y.to_string());
            }
            cmd_validate(&settings)
        }
    }
}

/// Microdata or pre-aggregated strata, detected from the header row.
enum InputKind {
    Microdata,
    Strata,
}

fn sniff_input(path: &Path) -> Result<InputKind> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("");
    if header.starts_with("survey_year,country_code") {
        Ok(InputKind::Microdata)
    } else if header.starts_with("survey_year,current_age,entry_year") {
        Ok(InputKind::Strata)
    } else {
        Err(Error::data(format!(
            "unrecognized input header: '{header}'"
        )))
    }
}

fn region_from_settings(settings: &Settings) -> Result<Region> {
    match settings.get("region").unwrap_or("other") {
        s if s.eq_ignore_ascii_case("lac") => Ok(Region::LatinAmericaCaribbean),
        s if s.eq_ignore_ascii_case("other") => Ok(Region::Other),
        s => Err(Error::data(format!("region must be lac or other, got '{s}'"))),
    }
}

struct FitResult {
    summary: OriginSummary,
    chains: Vec<Vec<Vec<f64>>>,
    diagnostics: Vec<(String, String)>,
    passed: bool,
}

/// Fit one origin's dataset and summarize the posterior.
fn fit_one(
    inputs: &ModelInputs,
    data: stockflow::probability::SurveyDataset,
    origin_name: &str,
    kappa_scale: f64,
    config: &SamplerConfig,
    rhat_threshold: f64,
) -> Result<FitResult> {
    let model = PosteriorModel::with_kappa_scale(inputs.clone(), data, kappa_scale)?;
    let init = model.initial_point();
    let (chains, stats) = sample(&model, &init, config)?;
    let draws = PosteriorDraws::new(chains.clone())?;

    // Convergence assessment.
    let divergences: usize = stats.iter().map(|s| s.divergences).sum();
    let mut rhat_ok = 0usize;
    let mut max_rhat = 0.0f64;
    let mut min_ess = f64::INFINITY;
    let dim = model.dim();
    for coord in 0..dim {
        let d = draws.diagnostics(coord);
        if d.rhat.is_finite() {
            max_rhat = max_rhat.max(d.rhat);
            if d.rhat <= rhat_threshold {
                rhat_ok += 1;
            }
        } else {
            rhat_ok += 1; // constant coordinate: trivially converged
        }
        if d.ess.is_finite() {
            min_ess = min_ess.min(d.ess);
        }
    }
    let frac_ok = rhat_ok as f64 / dim as f64;
    let passed = divergences == 0 && frac_ok >= 0.95;

    // Per-draw derived quantities. Population draws are kept in f32 to
    // bound memory at full grid sizes.
    let grid = &inputs.grid;
    let n_total = draws.n_total();
    let mut pop_draws: Vec<Vec<f32>> = Vec::with_capacity(n_total);
    let mut imm_draws: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    for x in draws.iter() {
        let pred = model.predict(x)?;
        pop_draws.push(pred.true_population.iter().map(|&v| v as f32).collect());
        imm_draws.push(pred.immigration);
    }

    let mut population = Vec::with_capacity(grid.len());
    let mut col = vec![0.0f64; n_total];
    for s in 0..grid.len() {
        for (d, row) in pop_draws.iter().enumerate() {
            col[d] = row[s] as f64;
        }
        let row = summarize_draws(&col);
        population.push((row.mean, row.lo95, row.hi95));
    }

    let entry_start = inputs.entry_years[0];
    let imm_start = entry_start.max(1950);
    let skip = (imm_start - entry_start) as usize;
    let n_years = imm_draws[0].len() - skip;
    let mut immigration = Vec::with_capacity(n_years);
    for yidx in 0..n_years {
        for (d, row) in imm_draws.iter().enumerate() {
            col[d] = row[skip + yidx];
        }
        let row = summarize_draws(&col);
        immigration.push((row.mean, row.lo95, row.hi95));
    }

    let mut diagnostics: Vec<(String, String)> = vec![
        ("origin".into(), origin_name.to_string()),
        ("parameters".into(), dim.to_string()),
        ("divergences".into(), divergences.to_string()),
        ("max_rhat".into(), format!("{max_rhat}")),
        ("frac_rhat_ok".into(), format!("{frac_ok}")),
        ("min_ess".into(), format!("{min_ess}")),
        ("passed".into(), passed.to_string()),
    ];
    for (i, s) in stats.iter().enumerate() {
        diagnostics.push((format!("chain{i}.step_size"), format!("{}", s.step_size)));
        diagnostics.push((format!("chain{i}.mean_accept"), format!("{}", s.mean_accept)));
        diagnostics.push((
            format!("chain{i}.max_depth_hits"),
            s.max_depth_hits.to_string(),
        ));
    }

    Ok(FitResult {
        summary: OriginSummary {
            origin: origin_name.to_string(),
            population,
            immigration,
            immigration_start: imm_start,
        },
        chains,
        diagnostics,
        passed,
    })
}

fn cmd_fit(settings: &Settings) -> Result<i32> {
    let out = settings.out_dir()?;
    let data_path = PathBuf::from(settings.require("data")?);
    let origin_text = settings.get("origin").unwrap_or("ALL").to_string();
    let origins: Vec<OriginSelection> = origin_text
        .split(',')
        .map(|s| OriginSelection::parse(s.trim()))
        .collect::<Result<_>>()?;
    let spec = settings.grid_spec()?;
    let grid = StrataGrid::enumerate(&spec)?;
    let inputs = ModelInputs::new(grid, settings.life_table()?)?;
    let config = settings.sampler_config()?;
    let kappa_scale = settings.parse("kappa_scale", 1.0)?;
    let rhat_threshold = settings.parse("rhat_threshold", 1.05)?;
    let map = OriginMap::default_2000();

    let kind = sniff_input(&data_path)?;
    let mut results = Vec::new();
    for sel in &origins {
        let data = match kind {
            InputKind::Microdata => {
                let records = read_microdata_csv(&data_path)?;
                let (data, report) = aggregate(records, &inputs.grid, sel, &map)?;
                eprintln!(
                    "origin {}: {} records used, {} malformed",
                    sel.column_name(),
                    report.records_used,
                    report.malformed
                );
                data
            }
            InputKind::Strata => {
                if origins.len() > 1 {
                    return Err(Error::data(
                        "pre-aggregated strata input carries a single origin; \
                         request one origin per file",
                    ));
                }
                read_strata_csv(&data_path, &inputs.grid, region_from_settings(settings)?, None)?
            }
        };
        let name = sel.column_name();
        let result = fit_one(&inputs, data, &name, kappa_scale, &config, rhat_threshold)?;
        write_draws_csv(&out.join(format!("draws_{name}.csv")), &result.chains)?;
        write_key_values(
            &out.join(format!("diagnostics_{name}.txt")),
            &result.diagnostics,
        )?;
        results.push(result);
    }

    let summaries: Vec<OriginSummary> = results.iter().map(|r| r.summary.clone()).collect();
    write_population_outputs(&out, "fb_pop_estimates", &inputs.grid, &summaries)?;
    write_immigration_outputs(&out, "fb_imm_estimates", &summaries)?;
    let all_passed = results.iter().all(|r| r.passed);
    write_key_values(
        &out.join("manifest.txt"),
        &settings.manifest(&[
            ("command".into(), "fit".into()),
            ("origins".into(), origin_text),
            ("seed".into(), config.seed.to_string()),
            ("diagnostics_passed".into(), all_passed.to_string()),
        ]),
    )?;
    Ok(if all_passed { 0 } else { EXIT_DIAGNOSTIC })
}

fn cmd_simulate(settings: &Settings) -> Result<i32> {
    let out = settings.out_dir()?;
    let seed = settings.parse("seed", 20_240_901u64)?;
    let mut spec = SyntheticSpec::desk_scale(seed)?;
    if let Some(lam) = settings.get("lambda") {
        spec.params.lambda = lam
            .parse()
            .map_err(|_| Error::data(format!("bad lambda '{lam}'")))?;
    }
    if let Some(sy) = settings.get("sigma_y") {
        spec.params.sigma_y = sy
            .parse()
            .map_err(|_| Error::data(format!("bad sigma_y '{sy}'")))?;
    }
    // Optionally shrink the grid for quick runs.
    if settings.get("survey_years").is_some() || settings.get("entry_year_min").is_some() {
        let gspec = settings.grid_spec()?;
        let grid = StrataGrid::enumerate(&gspec)?;
        let inputs = ModelInputs::new(grid, settings.life_table()?)?;
        let mut params = stockflow::cohort::ParameterSet::prior_means(&inputs);
        // Keep the desk-scale generating choices where shapes allow.
        let n_yoe = params.alpha.len();
        for (i, a) in params.alpha.iter_mut().enumerate() {
            let t = i as f64 / (n_yoe.max(2) - 1) as f64;
            *a = 11.8 + 0.9 * (3.0 * t).tanh();
        }
        params.theta = -0.0131;
        params.lambda = spec.params.lambda;
        params.sigma_y = spec.params.sigma_y;
        params.zeta_yoe10[4] = 0.2;
        params.kappa.iter_mut().for_each(|k| *k = -2.5);
        let n_svy = inputs.grid.survey_years().len();
        spec = SyntheticSpec {
            params,
            inputs,
            seed,
            inverse_weight: spec.inverse_weight,
            sample_sizes: vec![60_000.0; n_svy],
            region: spec.region,
        };
    }
    let (data, jhat) = simulate_survey_with_truth(&spec)?;
    write_strata_csv(&out.join("synthetic_data.csv"), &spec.inputs.grid, &data)?;

    // Generating truth for later scoring.
    {
        use std::io::Write as _;
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(out.join("synthetic_truth.csv"))?);
        writeln!(w, "survey_year,current_age,entry_year,expected_survey")?;
        for (off, key) in spec.inputs.grid.keys().iter().enumerate() {
            if jhat[off] > 0.0 {
                writeln!(w, "{},{},{},{}", key.cyr, key.age, key.yoe, jhat[off])?;
            }
        }
        w.flush()?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(
            out.join("synthetic_truth_immigration.csv"),
        )?);
        writeln!(w, "entry_year,immigration")?;
        for (i, year) in spec.inputs.entry_years.iter().enumerate() {
            writeln!(w, "{year},{}", spec.params.alpha[i].exp())?;
        }
        w.flush()?;
    }
    write_key_values(
        &out.join("manifest.txt"),
        &settings.manifest(&[
            ("command".into(), "simulate".into()),
            ("seed".into(), seed.to_string()),
        ]),
    )?;
    Ok(0)
}

fn cmd_validate(settings: &Settings) -> Result<i32> {
    let out = settings.out_dir()?;
    let data_path = PathBuf::from(settings.require("data")?);
    let year: i32 = settings
        .require("holdout_year")?
        .parse()
        .map_err(|_| Error::data("bad holdout_year"))?;
    let spec = settings.grid_spec()?;
    let grid = StrataGrid::enumerate(&spec)?;
    let inputs = ModelInputs::new(grid, settings.life_table()?)?;
    match sniff_input(&data_path)? {
        InputKind::Strata => {}
        InputKind::Microdata => {
            return Err(Error::data(
                "validate expects pre-aggregated strata input; aggregate first via fit",
            ))
        }
    }
    let data = read_strata_csv(&data_path, &inputs.grid, region_from_settings(settings)?, None)?;
    if !inputs.grid.survey_years().contains(&year) {
        return Err(Error::data(format!("hold-out year {year} not in the data grid")));
    }
    let se_const: f64 = settings.parse("se", 30.0)?;
    let se = vec![se_const; inputs.grid.len()];
    let config = settings.sampler_config()?;
    let report = holdout_validate(&inputs, &data, year, &se, &config)?;
    report.write(&out, &format!("holdout_{year}"))?;
    write_key_values(
        &out.join("manifest.txt"),
        &settings.manifest(&[
            ("command".into(), "validate".into()),
            ("holdout_year".into(), year.to_string()),
            ("seed".into(), config.seed.to_string()),
        ]),
    )?;

    // Threshold checks.
    let sd_min: f64 = settings.parse("residual_sd_min", 0.8)?;
    let sd_max: f64 = settings.parse("residual_sd_max", 1.25)?;
    let cov_min: f64 = settings.parse("coverage_min", 0.90)?;
    let cov_max: f64 = settings.parse("coverage_max", 0.99)?;
    let cal_max: f64 = settings.parse("calibration_max_dev", 0.1)?;
    let cal_ok = report
        .calibration
        .iter()
        .all(|b| (b.frequency - b.mean_p).abs() < cal_max);
    let pass = report.valid
        && (sd_min..=sd_max).contains(&report.residual_sd)
        && (cov_min..=cov_max).contains(&report.coverage)
        && cal_ok;
    eprintln!(
        "holdout {year}: residual_sd={:.3} coverage={:.3} valid={} -> {}",
        report.residual_sd,
        report.coverage,
        report.valid,
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass { 0 } else { EXIT_DIAGNOSTIC })
}
