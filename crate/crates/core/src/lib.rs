//! Bayesian stock-flow estimation of foreign-born population cohorts.
//!
//! The library fits a cohort model of immigration, mortality, and
//! emigration to repeated cross-sectional survey counts, correcting for
//! response heaping on round ages and entry years and for survey
//! undercount, and produces posterior summaries of disaggregated stocks
//! and annual inflows.

pub mod cohort;
pub mod data_io;
pub mod error;
pub mod inference;
pub mod lifetable;
pub mod observation;
pub mod probability;
pub mod splines;
pub mod strata;
pub mod tape;
pub mod validation;

pub use error::{Error, Result};
pub use strata::{derive_indices, enumerate_grid, GridSpec, StrataGrid, StratumKey};
pub use strata::{AGE_TOP, ENTRY_BOTTOM};
