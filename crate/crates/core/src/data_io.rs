//! Input ingestion (microdata and pre-aggregated strata), origin coding
//! rules, and the published output CSV schemas.

use crate::error::{Error, Result};
use crate::observation::Region;
use crate::probability::SurveyDataset;
use crate::strata::{StrataGrid, StratumKey, AGE_TOP, ENTRY_BOTTOM};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// One survey respondent row.
#[derive(Debug, Clone)]
pub struct MicrodataRecord {
    pub survey_year: i32,
    pub country_code: String,
    pub reported_age: i32,
    pub reported_entry_year: i32,
    pub analysis_weight: f64,
}

/// World Bank analytical regions used for origin grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorldRegion {
    EastAsiaPacific,
    EuropeCentralAsia,
    LatinAmericaCaribbean,
    MiddleEastNorthAfrica,
    NorthAmerica,
    SouthAsia,
    SubSaharanAfrica,
}

impl WorldRegion {
    pub const ALL: [WorldRegion; 7] = [
        WorldRegion::EastAsiaPacific,
        WorldRegion::EuropeCentralAsia,
        WorldRegion::LatinAmericaCaribbean,
        WorldRegion::MiddleEastNorthAfrica,
        WorldRegion::NorthAmerica,
        WorldRegion::SouthAsia,
        WorldRegion::SubSaharanAfrica,
    ];

    pub fn column_name(&self) -> &'static str {
        match self {
            WorldRegion::EastAsiaPacific => "WBregion_EAP",
            WorldRegion::EuropeCentralAsia => "WBregion_ECA",
            WorldRegion::LatinAmericaCaribbean => "WBregion_LAC",
            WorldRegion::MiddleEastNorthAfrica => "WBregion_MENA",
            WorldRegion::NorthAmerica => "WBregion_NAM",
            WorldRegion::SouthAsia => "WBregion_SAS",
            WorldRegion::SubSaharanAfrica => "WBregion_SSA",
        }
    }

    pub fn from_column(name: &str) -> Option<Self> {
        WorldRegion::ALL
            .iter()
            .copied()
            .find(|r| r.column_name() == name)
    }
}

/// Code used for records whose origin cannot be mapped.
pub const RESIDUAL_ORIGIN: &str = "XXX";

/// Origin coding: raw survey codes to ISO 3166-1 alpha-3, dependent
/// territories to their governing state, states created after 2000
/// pooled with their year-2000 predecessor, and ISO3 to World Bank
/// region.
#[derive(Debug, Clone)]
pub struct OriginMap {
    aliases: BTreeMap<String, String>,
    regions: BTreeMap<String, WorldRegion>,
}

impl OriginMap {
    /// Built-in mapping reflecting the world as of 2000.
    pub fn default_2000() -> Self {
        use WorldRegion::*;
        let mut regions = BTreeMap::new();
        for (code, region) in [
            // East Asia & Pacific.
            ("CHN", EastAsiaPacific),
            ("JPN", EastAsiaPacific),
            ("KOR", EastAsiaPacific),
            ("PRK", EastAsiaPacific),
            ("PHL", EastAsiaPacific),
            ("VNM", EastAsiaPacific),
            ("THA", EastAsiaPacific),
            ("IDN", EastAsiaPacific),
            ("MYS", EastAsiaPacific),
            ("SGP", EastAsiaPacific),
            ("KHM", EastAsiaPacific),
            ("LAO", EastAsiaPacific),
            ("MMR", EastAsiaPacific),
            ("MNG", EastAsiaPacific),
            ("AUS", EastAsiaPacific),
            ("NZL", EastAsiaPacific),
            ("FJI", EastAsiaPacific),
            ("PNG", EastAsiaPacific),
            ("WSM", EastAsiaPacific),
            ("TON", EastAsiaPacific),
            ("HKG", EastAsiaPacific),
            ("MAC", EastAsiaPacific),
            ("TWN", EastAsiaPacific),
            // Europe & Central Asia.
            ("ALB", EuropeCentralAsia),
            ("ARM", EuropeCentralAsia),
            ("AUT", EuropeCentralAsia),
            ("AZE", EuropeCentralAsia),
            ("BLR", EuropeCentralAsia),
            ("BEL", EuropeCentralAsia),
            ("BIH", EuropeCentralAsia),
            ("BGR", EuropeCentralAsia),
            ("HRV", EuropeCentralAsia),
            ("CZE", EuropeCentralAsia),
            ("DNK", EuropeCentralAsia),
            ("EST", EuropeCentralAsia),
            ("FIN", EuropeCentralAsia),
            ("FRA", EuropeCentralAsia),
            ("GEO", EuropeCentralAsia),
            ("DEU", EuropeCentralAsia),
            ("GRC", EuropeCentralAsia),
            ("HUN", EuropeCentralAsia),
            ("ISL", EuropeCentralAsia),
            ("IRL", EuropeCentralAsia),
            ("ITA", EuropeCentralAsia),
            ("KAZ", EuropeCentralAsia),
            ("KGZ", EuropeCentralAsia),
            ("LVA", EuropeCentralAsia),
            ("LTU", EuropeCentralAsia),
            ("MKD", EuropeCentralAsia),
            ("MDA", EuropeCentralAsia),
            ("NLD", EuropeCentralAsia),
            ("NOR", EuropeCentralAsia),
            ("POL", EuropeCentralAsia),
            ("PRT", EuropeCentralAsia),
            ("ROU", EuropeCentralAsia),
            ("RUS", EuropeCentralAsia),
            ("SVK", EuropeCentralAsia),
            ("SVN", EuropeCentralAsia),
            ("ESP", EuropeCentralAsia),
            ("SWE", EuropeCentralAsia),
            ("CHE", EuropeCentralAsia),
            ("TJK", EuropeCentralAsia),
            ("TUR", EuropeCentralAsia),
            ("TKM", EuropeCentralAsia),
            ("UKR", EuropeCentralAsia),
            ("GBR", EuropeCentralAsia),
            ("UZB", EuropeCentralAsia),
            ("YUG", EuropeCentralAsia),
            // Latin America & Caribbean.
            ("MEX", LatinAmericaCaribbean),
            ("GTM", LatinAmericaCaribbean),
            ("SLV", LatinAmericaCaribbean),
            ("HND", LatinAmericaCaribbean),
            ("NIC", LatinAmericaCaribbean),
            ("CRI", LatinAmericaCaribbean),
            ("PAN", LatinAmericaCaribbean),
            ("CUB", LatinAmericaCaribbean),
            ("DOM", LatinAmericaCaribbean),
            ("HTI", LatinAmericaCaribbean),
            ("JAM", LatinAmericaCaribbean),
            ("TTO", LatinAmericaCaribbean),
            ("BRB", LatinAmericaCaribbean),
            ("BHS", LatinAmericaCaribbean),
            ("BLZ", LatinAmericaCaribbean),
            ("COL", LatinAmericaCaribbean),
            ("VEN", LatinAmericaCaribbean),
            ("ECU", LatinAmericaCaribbean),
            ("PER", LatinAmericaCaribbean),
            ("BOL", LatinAmericaCaribbean),
            ("BRA", LatinAmericaCaribbean),
            ("PRY", LatinAmericaCaribbean),
            ("URY", LatinAmericaCaribbean),
            ("ARG", LatinAmericaCaribbean),
            ("CHL", LatinAmericaCaribbean),
            ("GUY", LatinAmericaCaribbean),
            ("SUR", LatinAmericaCaribbean),
            ("GRD", LatinAmericaCaribbean),
            ("DMA", LatinAmericaCaribbean),
            ("LCA", LatinAmericaCaribbean),
            ("VCT", LatinAmericaCaribbean),
            ("ATG", LatinAmericaCaribbean),
            ("KNA", LatinAmericaCaribbean),
            // Middle East & North Africa.
            ("DZA", MiddleEastNorthAfrica),
            ("BHR", MiddleEastNorthAfrica),
            ("EGY", MiddleEastNorthAfrica),
            ("IRN", MiddleEastNorthAfrica),
            ("IRQ", MiddleEastNorthAfrica),
            ("ISR", MiddleEastNorthAfrica),
            ("JOR", MiddleEastNorthAfrica),
            ("KWT", MiddleEastNorthAfrica),
            ("LBN", MiddleEastNorthAfrica),
            ("LBY", MiddleEastNorthAfrica),
            ("MAR", MiddleEastNorthAfrica),
            ("OMN", MiddleEastNorthAfrica),
            ("QAT", MiddleEastNorthAfrica),
            ("SAU", MiddleEastNorthAfrica),
            ("SYR", MiddleEastNorthAfrica),
            ("TUN", MiddleEastNorthAfrica),
            ("ARE", MiddleEastNorthAfrica),
            ("YEM", MiddleEastNorthAfrica),
            // North America.
            ("CAN", NorthAmerica),
            ("USA", NorthAmerica),
            // South Asia.
            ("AFG", SouthAsia),
            ("BGD", SouthAsia),
            ("BTN", SouthAsia),
            ("IND", SouthAsia),
            ("MDV", SouthAsia),
            ("NPL", SouthAsia),
            ("PAK", SouthAsia),
            ("LKA", SouthAsia),
            // Sub-Saharan Africa.
            ("AGO", SubSaharanAfrica),
            ("BEN", SubSaharanAfrica),
            ("BWA", SubSaharanAfrica),
            ("BFA", SubSaharanAfrica),
            ("CMR", SubSaharanAfrica),
            ("CPV", SubSaharanAfrica),
            ("TCD", SubSaharanAfrica),
            ("COD", SubSaharanAfrica),
            ("COG", SubSaharanAfrica),
            ("CIV", SubSaharanAfrica),
            ("ERI", SubSaharanAfrica),
            ("ETH", SubSaharanAfrica),
            ("GHA", SubSaharanAfrica),
            ("GIN", SubSaharanAfrica),
            ("KEN", SubSaharanAfrica),
            ("LBR", SubSaharanAfrica),
            ("MDG", SubSaharanAfrica),
            ("MWI", SubSaharanAfrica),
            ("MLI", SubSaharanAfrica),
            ("MRT", SubSaharanAfrica),
            ("MUS", SubSaharanAfrica),
            ("MOZ", SubSaharanAfrica),
            ("NAM", SubSaharanAfrica),
            ("NER", SubSaharanAfrica),
            ("NGA", SubSaharanAfrica),
            ("RWA", SubSaharanAfrica),
            ("SEN", SubSaharanAfrica),
            ("SLE", SubSaharanAfrica),
            ("SOM", SubSaharanAfrica),
            ("ZAF", SubSaharanAfrica),
            ("SDN", SubSaharanAfrica),
            ("TZA", SubSaharanAfrica),
            ("TGO", SubSaharanAfrica),
            ("UGA", SubSaharanAfrica),
            ("ZMB", SubSaharanAfrica),
            ("ZWE", SubSaharanAfrica),
        ] {
            regions.insert(code.to_string(), region);
        }

        let mut aliases = BTreeMap::new();
        // States created after 2000, pooled with their 2000 predecessor.
        for (from, to) in [
            ("SRB", "YUG"),
            ("MNE", "YUG"),
            ("XKX", "YUG"),
            ("SSD", "SDN"),
            ("TLS", "IDN"),
        ] {
            aliases.insert(from.to_string(), to.to_string());
        }
        // Dependent territories pooled with the governing state.
        for (from, to) in [
            ("GLP", "FRA"),
            ("MTQ", "FRA"),
            ("GUF", "FRA"),
            ("REU", "FRA"),
            ("PYF", "FRA"),
            ("NCL", "FRA"),
            ("SPM", "FRA"),
            ("BMU", "GBR"),
            ("CYM", "GBR"),
            ("GIB", "GBR"),
            ("VGB", "GBR"),
            ("AIA", "GBR"),
            ("MSR", "GBR"),
            ("TCA", "GBR"),
            ("FLK", "GBR"),
            ("ABW", "NLD"),
            ("ANT", "NLD"),
            ("CUW", "NLD"),
            ("SXM", "NLD"),
            ("GRL", "DNK"),
            ("FRO", "DNK"),
            ("COK", "NZL"),
            ("NIU", "NZL"),
            ("TKL", "NZL"),
            ("ASM", "USA"),
            ("GUM", "USA"),
            ("MNP", "USA"),
            ("VIR", "USA"),
        ] {
            aliases.insert(from.to_string(), to.to_string());
        }
        OriginMap { aliases, regions }
    }

    /// Register a survey-specific raw code as an alias of an ISO3 code.
    pub fn add_alias(&mut self, from: &str, to: &str) {
        self.aliases.insert(from.to_string(), to.to_string());
    }

    /// Resolve any code to its pooled ISO3 form; unknown codes fall into
    /// the residual bucket.
    pub fn resolve(&self, code: &str) -> String {
        let code = code.trim().to_ascii_uppercase();
        let mut cur = code;
        // Pooling is idempotent; follow at most a short alias chain.
        for _ in 0..4 {
            match self.aliases.get(&cur) {
                Some(next) => cur = next.clone(),
                None => break,
            }
        }
        if self.regions.contains_key(&cur) {
            cur
        } else {
            RESIDUAL_ORIGIN.to_string()
        }
    }

    pub fn region_of(&self, iso3: &str) -> Option<WorldRegion> {
        self.regions.get(iso3).copied()
    }

    /// All ISO3 codes the map can produce, alphabetically.
    pub fn known_codes(&self) -> Vec<String> {
        self.regions.keys().cloned().collect()
    }
}

/// What a fit targets: everyone, one World Bank region, or one country.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginSelection {
    All,
    Region(WorldRegion),
    Country(String),
    Residual,
}

impl OriginSelection {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("ALL") {
            return Ok(OriginSelection::All);
        }
        if s == RESIDUAL_ORIGIN {
            return Ok(OriginSelection::Residual);
        }
        if let Some(r) = WorldRegion::from_column(s) {
            return Ok(OriginSelection::Region(r));
        }
        if s.len() == 3 && s.chars().all(|c| c.is_ascii_uppercase()) {
            return Ok(OriginSelection::Country(s.to_string()));
        }
        Err(Error::data(format!(
            "origin '{s}' is not ALL, a WBregion_* name, or an ISO3 code"
        )))
    }

    pub fn column_name(&self) -> String {
        match self {
            OriginSelection::All => "ALL".to_string(),
            OriginSelection::Region(r) => r.column_name().to_string(),
            OriginSelection::Country(c) => c.clone(),
            OriginSelection::Residual => RESIDUAL_ORIGIN.to_string(),
        }
    }

    fn matches(&self, iso3: &str, map: &OriginMap) -> bool {
        match self {
            OriginSelection::All => true,
            OriginSelection::Region(r) => map.region_of(iso3) == Some(*r),
            OriginSelection::Country(c) => iso3 == c,
            OriginSelection::Residual => iso3 == RESIDUAL_ORIGIN,
        }
    }

    /// Flag used to pick the undercount calibration target.
    pub fn region_flag(&self, map: &OriginMap) -> Region {
        match self {
            OriginSelection::Region(WorldRegion::LatinAmericaCaribbean) => {
                Region::LatinAmericaCaribbean
            }
            OriginSelection::Country(c)
                if map.region_of(c) == Some(WorldRegion::LatinAmericaCaribbean) =>
            {
                Region::LatinAmericaCaribbean
            }
            _ => Region::Other,
        }
    }
}

/// Outcome counters from a streaming aggregation pass.
#[derive(Debug, Clone, Default)]
pub struct AggregateReport {
    pub records_read: usize,
    pub records_used: usize,
    pub malformed: usize,
}

const MALFORMED_TOLERANCE: f64 = 0.01;

/// Fold a record stream into a per-stratum survey dataset for one origin
/// selection. Ages above the top code and entry years below the bottom
/// code are collapsed into the boundary cells.
pub fn aggregate<I: IntoIterator<Item = MicrodataRecord>>(
    records: I,
    grid: &StrataGrid,
    origin: &OriginSelection,
    map: &OriginMap,
) -> Result<(SurveyDataset, AggregateReport)> {
    let n = grid.len();
    // Contributions are collected and summed in a canonical order so the
    // result is bit-identical regardless of record order.
    let mut contribs: Vec<(usize, f64)> = Vec::new();
    let mut counts = vec![0usize; n];
    let survey_years = grid.survey_years().to_vec();
    let mut sample_size = vec![0.0f64; survey_years.len()];
    let mut report = AggregateReport::default();

    for rec in records {
        report.records_read += 1;
        let valid = rec.analysis_weight.is_finite()
            && rec.analysis_weight > 0.0
            && rec.reported_age >= 0
            && rec.reported_entry_year <= rec.survey_year
            && survey_years.contains(&rec.survey_year);
        if !valid {
            report.malformed += 1;
            continue;
        }
        let svy_idx = survey_years
            .iter()
            .position(|&y| y == rec.survey_year)
            .unwrap();
        sample_size[svy_idx] += 1.0;
        let iso3 = map.resolve(&rec.country_code);
        if !origin.matches(&iso3, map) {
            continue;
        }
        let age = rec.reported_age.min(AGE_TOP);
        let yoe = rec.reported_entry_year.max(ENTRY_BOTTOM);
        let key = match StratumKey::new(rec.survey_year, age, yoe) {
            Ok(k) => k,
            Err(_) => {
                report.malformed += 1;
                continue;
            }
        };
        let off = match grid.offset(&key) {
            Some(o) => o,
            None => {
                report.malformed += 1;
                continue;
            }
        };
        report.records_used += 1;
        contribs.push((off, rec.analysis_weight));
        counts[off] += 1;
    }
    contribs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut weight_sum = vec![0.0f64; n];
    for (off, w) in contribs {
        weight_sum[off] += w;
    }

    if report.records_read > 0
        && (report.malformed as f64) > MALFORMED_TOLERANCE * report.records_read as f64
    {
        return Err(Error::data(format!(
            "{} of {} records malformed (tolerance {}%)",
            report.malformed,
            report.records_read,
            MALFORMED_TOLERANCE * 100.0
        )));
    }
    for s in sample_size.iter_mut() {
        if *s == 0.0 {
            *s = 1.0; // avoid a degenerate prior mean for unseen years
        }
    }
    let o: Vec<f64> = weight_sum
        .iter()
        .zip(&counts)
        .map(|(&w, &c)| if w > 0.0 { c as f64 / w } else { 0.0 })
        .collect();
    let data = SurveyDataset::new(grid, weight_sum, o, sample_size, origin.region_flag(map))?;
    Ok((data, report))
}

/// Read microdata rows from a five-column CSV:
/// `survey_year,country_code,reported_age,reported_entry_year,analysis_weight`.
pub fn read_microdata_csv(path: &Path) -> Result<Vec<MicrodataRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(Error::data(format!(
                "microdata rows need 5 columns, got {}",
                row.len()
            )));
        }
        out.push(MicrodataRecord {
            survey_year: parse_field(&row, 0, "survey_year")?,
            country_code: row[1].to_string(),
            reported_age: parse_field(&row, 2, "reported_age")?,
            reported_entry_year: parse_field(&row, 3, "reported_entry_year")?,
            analysis_weight: parse_float(&row, 4, "analysis_weight")?,
        });
    }
    Ok(out)
}

fn parse_field(row: &csv::StringRecord, i: usize, name: &str) -> Result<i32> {
    row[i]
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("bad {name}: '{}'", &row[i])))
}

fn parse_float(row: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    row[i]
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("bad {name}: '{}'", &row[i])))
}

/// Read a pre-aggregated strata CSV:
/// `survey_year,current_age,entry_year,y,n`. Strata absent from the file
/// are treated as empty.
pub fn read_strata_csv(
    path: &Path,
    grid: &StrataGrid,
    region: Region,
    sample_sizes: Option<Vec<f64>>,
) -> Result<SurveyDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let n = grid.len();
    let mut y = vec![0.0f64; n];
    let mut counts = vec![0.0f64; n];
    let survey_years = grid.survey_years().to_vec();
    let mut counted = vec![0.0f64; survey_years.len()];
    for row in rdr.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(Error::data("strata rows need 5 columns"));
        }
        let svy: i32 = parse_field(&row, 0, "survey_year")?;
        let age: i32 = parse_field(&row, 1, "current_age")?;
        let yoe: i32 = parse_field(&row, 2, "entry_year")?;
        let yv: f64 = parse_float(&row, 3, "y")?;
        let nv: f64 = parse_float(&row, 4, "n")?;
        let key = StratumKey::new(svy, age.min(AGE_TOP), yoe.max(ENTRY_BOTTOM))?;
        let off = grid
            .offset(&key)
            .ok_or_else(|| Error::data(format!("stratum {svy}/{age}/{yoe} not in grid")))?;
        y[off] += yv;
        counts[off] += nv;
        if let Some(i) = survey_years.iter().position(|&s| s == svy) {
            counted[i] += nv;
        }
    }
    let o: Vec<f64> = y
        .iter()
        .zip(&counts)
        .map(|(&yy, &nn)| if yy > 0.0 { nn / yy } else { 0.0 })
        .collect();
    let sample_sizes = match sample_sizes {
        Some(s) => s,
        None => counted.iter().map(|&c| c.max(1.0)).collect(),
    };
    SurveyDataset::new(grid, y, o, sample_sizes, region)
}

/// Write a survey dataset in the pre-aggregated strata schema (nonzero
/// strata only).
pub fn write_strata_csv(path: &Path, grid: &StrataGrid, data: &SurveyDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["survey_year", "current_age", "entry_year", "y", "n"])?;
    for (off, key) in grid.keys().iter().enumerate() {
        if data.y[off] > 0.0 {
            let n = data.y[off] * data.o[off];
            w.write_record([
                key.cyr.to_string(),
                key.age.to_string(),
                key.yoe.to_string(),
                format_value(data.y[off]),
                format_value(n),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------
// Published output schemas.

/// Point estimate and equal-tailed 95% bounds for every output quantity
/// of one origin fit.
#[derive(Debug, Clone)]
pub struct OriginSummary {
    pub origin: String,
    /// Aligned with the grid: (mean, lower, upper) per stratum.
    pub population: Vec<(f64, f64, f64)>,
    /// One row per entry year starting at `immigration_start`.
    pub immigration: Vec<(f64, f64, f64)>,
    pub immigration_start: i32,
}

/// Shortest decimal text that parses back to the identical f64.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Published column order: ALL first, the seven region columns, then
/// ISO3 codes alphabetically (residual bucket last).
pub fn order_origin_columns(names: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    if names.iter().any(|n| n == "ALL") {
        out.push("ALL".to_string());
    }
    for r in WorldRegion::ALL {
        if names.iter().any(|n| n == r.column_name()) {
            out.push(r.column_name().to_string());
        }
    }
    let mut iso: Vec<String> = names
        .iter()
        .filter(|n| {
            n.as_str() != "ALL"
                && n.as_str() != RESIDUAL_ORIGIN
                && WorldRegion::from_column(n).is_none()
        })
        .cloned()
        .collect();
    iso.sort();
    iso.dedup();
    out.extend(iso);
    if names.iter().any(|n| n == RESIDUAL_ORIGIN) {
        out.push(RESIDUAL_ORIGIN.to_string());
    }
    out
}

/// Which of the three companion files to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Mean,
    Lo95,
    Hi95,
}

impl Band {
    fn pick(&self, v: (f64, f64, f64)) -> f64 {
        match self {
            Band::Mean => v.0,
            Band::Lo95 => v.1,
            Band::Hi95 => v.2,
        }
    }

    fn suffix(&self) -> &'static str {
        match self {
            Band::Mean => "",
            Band::Lo95 => "_lo95",
            Band::Hi95 => "_hi95",
        }
    }
}

/// Write the population estimate files (point estimates plus the
/// `_lo95`/`_hi95` companions) for a set of origin fits. `stem` is the
/// file name without extension.
pub fn write_population_outputs(
    dir: &Path,
    stem: &str,
    grid: &StrataGrid,
    summaries: &[OriginSummary],
) -> Result<Vec<std::path::PathBuf>> {
    let names: Vec<String> = summaries.iter().map(|s| s.origin.clone()).collect();
    let columns = order_origin_columns(&names);
    let by_name = index_summaries(summaries, &columns)?;
    for s in summaries {
        if s.population.len() != grid.len() {
            return Err(Error::data(format!(
                "population summary for {} does not match the grid",
                s.origin
            )));
        }
    }
    let mut written = Vec::new();
    for band in [Band::Mean, Band::Lo95, Band::Hi95] {
        let path = dir.join(format!("{stem}{}.csv", band.suffix()));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let mut header = String::from("survey_year,current_age,entry_year");
        for c in &columns {
            header.push(',');
            header.push_str(c);
        }
        writeln!(w, "{header}")?;
        for (off, key) in grid.keys().iter().enumerate() {
            write!(w, "{},{},{}", key.cyr, key.age, key.yoe)?;
            for c in &columns {
                let s = &summaries[by_name[c.as_str()]];
                write!(w, ",{}", format_value(band.pick(s.population[off])))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Write the immigration flow files. Rows cover the union of the
/// summaries' entry-year spans.
pub fn write_immigration_outputs(
    dir: &Path,
    stem: &str,
    summaries: &[OriginSummary],
) -> Result<Vec<std::path::PathBuf>> {
    let names: Vec<String> = summaries.iter().map(|s| s.origin.clone()).collect();
    let columns = order_origin_columns(&names);
    let by_name = index_summaries(summaries, &columns)?;
    let start = summaries
        .iter()
        .map(|s| s.immigration_start)
        .min()
        .unwrap_or(1950);
    let end = summaries
        .iter()
        .map(|s| s.immigration_start + s.immigration.len() as i32 - 1)
        .max()
        .unwrap_or(start - 1);
    let mut written = Vec::new();
    for band in [Band::Mean, Band::Lo95, Band::Hi95] {
        let path = dir.join(format!("{stem}{}.csv", band.suffix()));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let mut header = String::from("entry_year");
        for c in &columns {
            header.push(',');
            header.push_str(c);
        }
        writeln!(w, "{header}")?;
        for year in start..=end {
            write!(w, "{year}")?;
            for c in &columns {
                let s = &summaries[by_name[c.as_str()]];
                let idx = year - s.immigration_start;
                let v = if idx >= 0 && (idx as usize) < s.immigration.len() {
                    band.pick(s.immigration[idx as usize])
                } else {
                    0.0
                };
                write!(w, ",{}", format_value(v))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

fn index_summaries<'a>(
    summaries: &'a [OriginSummary],
    columns: &'a [String],
) -> Result<BTreeMap<&'a str, usize>> {
    let mut by_name = BTreeMap::new();
    for (i, s) in summaries.iter().enumerate() {
        by_name.insert(s.origin.as_str(), i);
    }
    let missing: Vec<&str> = columns
        .iter()
        .map(|c| c.as_str())
        .filter(|c| !by_name.contains_key(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "missing origin columns: {}",
            missing.join(", ")
        )));
    }
    Ok(by_name)
}

/// Persist raw draws for audit: one row per (draw, chain, parameter).
pub fn write_draws_csv(path: &Path, chains: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "draw,chain,parameter,value")?;
    for (c, chain) in chains.iter().enumerate() {
        for (d, draw) in chain.iter().enumerate() {
            for (p, v) in draw.iter().enumerate() {
                writeln!(w, "{d},{c},{p},{}", format_value(*v))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain `key = value` diagnostics/manifest file.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in pairs {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a `key = value` config file. `#` starts a comment; blank lines
/// are ignored; duplicate keys keep the last value.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::data(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::data(format!("config line {}: empty key", lineno + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}
