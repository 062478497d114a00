use std::fmt::Write as _;
use std::path::Path;

use super::FemError;

/// Piecewise-constant coefficient `kappa`, one strictly positive value per fine cell,
/// row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    ncx: usize,
    ncy: usize,
    values: Vec<f64>,
}

impl PermeabilityField {
    pub fn new(ncx: usize, ncy: usize, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != ncx * ncy {
            return Err(FemError::FieldSize { expected: ncx * ncy, found: values.len() });
        }
        if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(FemError::NonPositiveKappa { cell, value });
        }
        Ok(PermeabilityField { ncx, ncy, values })
    }

    pub fn constant(ncx: usize, ncy: usize, value: f64) -> Result<Self, FemError> {
        Self::new(ncx, ncy, vec![value; ncx * ncy])
    }

    pub fn cells_x(&self) -> usize {
        self.ncx
    }

    pub fn cells_y(&self) -> usize {
        self.ncy
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `max / min`.
    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, FemError> {
        Self::new(self.ncx, self.ncy, self.values.iter().map(|v| v * factor).collect())
    }

    /// Serializes as `KAPPA v1 <ncx> <ncy>` followed by one line per cell row.
    pub fn to_kappa_string(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8 + 32);
        writeln!(out, "KAPPA v1 {} {}", self.ncx, self.ncy).unwrap();
        for row in self.values.chunks(self.ncx) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                // shortest representation that parses back to the same bits
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_kappa(text: &str) -> Result<Self, FemError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FemError::Parse("empty field file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "KAPPA" || parts[1] != "v1" {
            return Err(FemError::Parse(format!("bad header '{header}'")));
        }
        let ncx: usize = parts[2].parse().map_err(|_| FemError::Parse(format!("bad width '{}'", parts[2])))?;
        let ncy: usize = parts[3].parse().map_err(|_| FemError::Parse(format!("bad height '{}'", parts[3])))?;
        let mut values = Vec::with_capacity(ncx * ncy);
        for (row, line) in lines.enumerate() {
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| FemError::Parse(format!("bad value '{tok}' in row {row}")))?;
                values.push(v);
            }
            if values.len() - before != ncx {
                return Err(FemError::Parse(format!(
                    "row {row} has {} values, expected {ncx}",
                    values.len() - before
                )));
            }
        }
        Self::new(ncx, ncy, values)
    }

    pub fn read(path: &Path) -> Result<Self, FemError> {
        let text = std::fs::read_to_string(path).map_err(|e| FemError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_kappa(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), FemError> {
        std::fs::write(path, self.to_kappa_string()).map_err(|e| FemError::Io(format!("{}: {e}", path.display())))
    }
}
