//! Reference-year mortality rates by single year of age.

use std::path::Path;

use crate::error::{Error, Result};
use crate::strata::AGE_TOP;

/// Mortality rates by single year of age for one reference year.
#[derive(Debug, Clone)]
pub struct LifeTable {
    /// Annual mortality rate per age 0..=91 (the 91 entry covers 91+).
    pub rates: Vec<f64>,
    pub reference_year: i32,
}

impl LifeTable {
    pub fn new(rates: Vec<f64>, reference_year: i32) -> Result<Self> {
        if rates.len() != (AGE_TOP + 1) as usize {
            return Err(Error::domain(format!(
                "life table must cover ages 0..={AGE_TOP} contiguously, got {} rows",
                rates.len()
            )));
        }
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::domain("life table rates must be positive and finite"));
        }
        Ok(LifeTable {
            rates,
            reference_year,
        })
    }

    /// Load from a CSV with header `age,rate,year`. All rows must share one
    /// reference year and cover ages 0..=91.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rates = vec![f64::NAN; (AGE_TOP + 1) as usize];
        let mut year: Option<i32> = None;
        for record in reader.records() {
            let record = record?;
            let age: i32 = field(&record, 0, "age")?;
            let rate: f64 = field(&record, 1, "rate")?;
            let y: i32 = field(&record, 2, "year")?;
            match year {
                None => year = Some(y),
                Some(prev) if prev != y => {
                    return Err(Error::data(format!(
                        "life table mixes reference years {prev} and {y}"
                    )))
                }
                _ => {}
            }
            if !(0..=AGE_TOP).contains(&age) {
                return Err(Error::data(format!("life table age {age} out of range")));
            }
            rates[age as usize] = rate;
        }
        if rates.iter().any(|r| r.is_nan()) {
            return Err(Error::domain("life table missing ages"));
        }
        LifeTable::new(rates, year.ok_or_else(|| Error::data("empty life table"))?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("age,rate,year\n");
        for (age, rate) in self.rates.iter().enumerate() {
            out.push_str(&format!("{age},{rate},{}\n", self.reference_year));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Bundled 2012-like synthetic table: a Siler curve with infant
    /// mortality around 0.6% and an old-age rate near 0.18 at 91.
    pub fn default_2012() -> Self {
        let rates = (0..=AGE_TOP)
            .map(|age| {
                let x = age as f64;
                0.006 * (-1.0 * x).exp() + 2.0e-4 + 3.5e-5 * (0.094 * x).exp()
            })
            .collect();
        LifeTable::new(rates, 2012).expect("bundled table is valid")
    }
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    record
        .get(idx)
        .ok_or_else(|| Error::data(format!("missing {name} column")))?
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("bad {name} value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_plausible() {
        let lt = LifeTable::default_2012();
        assert_eq!(lt.reference_year, 2012);
        assert_eq!(lt.rates.len(), 92);
        assert!(lt.rates[0] > lt.rates[10]);
        assert!(lt.rates[91] > 0.1 && lt.rates[91] < 0.5);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lt.csv");
        let lt = LifeTable::default_2012();
        lt.write_csv(&path).unwrap();
        let back = LifeTable::from_csv(&path).unwrap();
        assert_eq!(back.reference_year, 2012);
        for (a, b) in lt.rates.iter().zip(&back.rates) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_ages_rejected() {
        assert!(LifeTable::new(vec![0.01; 50], 2012).is_err());
        assert!(LifeTable::new(vec![-0.01; 92], 2012).is_err());
    }
}
