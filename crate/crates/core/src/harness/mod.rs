//! Experiment engine: permeability fields, sources, run configuration,
//! convergence records and their CSV and plot output.

mod config;
mod experiment;
mod fields;
mod output;

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use config::{KappaSource, RecordLevel, RunConfig};
pub use experiment::{build_problem, run_experiment, run_on, Problem, RunOutput};
pub use fields::{channels_8x8, generate_field, inclusions_and_channels, FieldSpec, RandomInclusions, Shape, NAMED_FIELDS};
pub use output::{parse_csv, plot_script, write_csv, ConvergenceRecord, CsvWriter, CSV_HEADER};

use crate::basis::BasisError;
use crate::enrich::EnrichError;
use crate::fem::{FemError, Source};
use crate::grid::{GridError, GridHierarchy};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("geometry '{0}' leaves the domain")]
    OutOfDomain(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Enrich(#[from] EnrichError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, err: impl fmt::Display) -> Self {
        HarnessError::Io { path: path.to_path_buf(), message: err.to_string() }
    }
}

/// Right-hand side of the experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Constant(f64),
    /// `sin(pi x) sin(pi y)`.
    Sine,
    /// `+1` on a disk of radius 0.08 at (0.25, 0.75) and `-1` on one at
    /// (0.75, 0.25); a stand-in for a localized injector/producer pair.
    TwoBlob,
    /// Per-cell values in `SOURCE v1 <ncx> <ncy>` format, laid out like a
    /// KAPPA file.
    File(PathBuf),
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Constant(1.0)
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::Constant(c) => write!(f, "constant:{c}"),
            SourceSpec::Sine => f.write_str("sine"),
            SourceSpec::TwoBlob => f.write_str("two-blob"),
            SourceSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for SourceSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || HarnessError::Config(format!("unknown source '{s}'"));
        if let Some(c) = s.strip_prefix("constant:") {
            return c.parse().map(SourceSpec::Constant).map_err(|_| bad());
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(SourceSpec::File(PathBuf::from(p)));
        }
        match s {
            "constant" => Ok(SourceSpec::Constant(1.0)),
            "sine" => Ok(SourceSpec::Sine),
            "two-blob" => Ok(SourceSpec::TwoBlob),
            _ => s.parse().map(SourceSpec::Constant).map_err(|_| bad()),
        }
    }
}

impl SourceSpec {
    pub fn to_source(&self, grids: &GridHierarchy) -> Result<Source, HarnessError> {
        Ok(match self {
            SourceSpec::Constant(c) => Source::Constant(*c),
            SourceSpec::Sine => Source::function(|x, y| (PI * x).sin() * (PI * y).sin()),
            SourceSpec::TwoBlob => Source::function(two_blob),
            SourceSpec::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                let values = parse_source(&text, grids.fine_cells_x(), grids.fine_cells_y())?;
                Source::PerCell(values)
            }
        })
    }
}

fn two_blob(x: f64, y: f64) -> f64 {
    let r2 = 0.08 * 0.08;
    if (x - 0.25).powi(2) + (y - 0.75).powi(2) < r2 {
        1.0
    } else if (x - 0.75).powi(2) + (y - 0.25).powi(2) < r2 {
        -1.0
    } else {
        0.0
    }
}

fn parse_source(text: &str, ncx: usize, ncy: usize) -> Result<Vec<f64>, HarnessError> {
    let mut tokens = text.split_whitespace();
    let header: Vec<&str> = tokens.by_ref().take(4).collect();
    if header.len() != 4 || header[0] != "SOURCE" || header[1] != "v1" {
        return Err(HarnessError::Config("source file must start with 'SOURCE v1 <ncx> <ncy>'".into()));
    }
    if header[2] != ncx.to_string() || header[3] != ncy.to_string() {
        return Err(HarnessError::Config(format!(
            "source file is {}x{} cells, grid has {ncx}x{ncy}",
            header[2], header[3]
        )));
    }
    let values: Vec<f64> = tokens
        .map(|t| t.parse().map_err(|_| HarnessError::Config(format!("bad source value '{t}'"))))
        .collect::<Result<_, _>>()?;
    if values.len() != ncx * ncy {
        return Err(HarnessError::Config(format!("source file has {} values, expected {}", values.len(), ncx * ncy)));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_names_round_trip() {
        for s in [SourceSpec::Constant(2.5), SourceSpec::Sine, SourceSpec::TwoBlob, SourceSpec::File("a/b.src".into())] {
            assert_eq!(s.to_string().parse::<SourceSpec>().unwrap(), s);
        }
        assert_eq!("3".parse::<SourceSpec>().unwrap(), SourceSpec::Constant(3.0));
        assert!("blob".parse::<SourceSpec>().is_err());
    }

    #[test]
    fn two_blob_has_zero_mean_support() {
        assert_eq!(two_blob(0.25, 0.75), 1.0);
        assert_eq!(two_blob(0.75, 0.25), -1.0);
        assert_eq!(two_blob(0.5, 0.5), 0.0);
    }

    #[test]
    fn source_file_is_checked_against_the_grid() {
        assert_eq!(parse_source("SOURCE v1 2 1\n1 -2\n", 2, 1).unwrap(), vec![1.0, -2.0]);
        assert!(parse_source("SOURCE v1 2 1\n1\n", 2, 1).is_err());
        assert!(parse_source("SOURCE v1 1 2\n1 2\n", 2, 1).is_err());
        assert!(parse_source("KAPPA v1 2 1\n1 2\n", 2, 1).is_err());
    }
}
