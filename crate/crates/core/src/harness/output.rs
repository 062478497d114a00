use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::HarnessError;
use crate::enrich::{StepRecord, SweepRecord};

pub const CSV_HEADER: &str = "iter,dof,e_a,e_2,residual_total,lambda_min,wall_ms";

/// One CSV row. `lambda_min` is NaN when no neighborhood has a next eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRecord {
    pub iteration: usize,
    pub dof: usize,
    pub e_a: f64,
    pub e_2: f64,
    pub residual_total: f64,
    pub lambda_min: f64,
    pub wall_ms: f64,
}

impl ConvergenceRecord {
    pub fn from_sweep(s: &SweepRecord) -> Self {
        ConvergenceRecord {
            iteration: s.iteration,
            dof: s.dof,
            e_a: s.e_a,
            e_2: s.e_2,
            residual_total: s.residual_total,
            lambda_min: s.lambda_min.unwrap_or(f64::NAN),
            wall_ms: s.wall_ms,
        }
    }

    /// Row for a color sub-iteration; `iteration` counts sub-iterations and
    /// `lambda_min` is taken over the marked neighborhoods.
    pub fn from_step(index: usize, s: &StepRecord) -> Self {
        ConvergenceRecord {
            iteration: index,
            dof: s.dof,
            e_a: s.e_a,
            e_2: s.e_2,
            residual_total: s.residual_total,
            lambda_min: s.onerp.as_ref().map_or(f64::NAN, |o| o.lambda_min),
            wall_ms: s.wall_ms,
        }
    }

    fn fields(&self) -> [String; 7] {
        // 17 significant digits: exact round trip for every finite double
        let g = |v: f64| format!("{v:.16e}");
        [
            self.iteration.to_string(),
            self.dof.to_string(),
            g(self.e_a),
            g(self.e_2),
            g(self.residual_total),
            g(self.lambda_min),
            g(self.wall_ms),
        ]
    }
}

/// Streams records to disk, flushing after every row so that an aborted run
/// leaves everything produced so far.
pub struct CsvWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = CsvWriter { inner: csv::Writer::from_writer(file), path: path.to_path_buf() };
        w.row(CSV_HEADER.split(','))?;
        Ok(w)
    }

    fn row<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(&mut self, fields: I) -> Result<(), HarnessError> {
        self.inner.write_record(fields).map_err(|e| HarnessError::io(&self.path, e))?;
        self.inner.flush().map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn push(&mut self, record: &ConvergenceRecord) -> Result<(), HarnessError> {
        self.row(record.fields())
    }

    /// Appends `# error: <message>` and closes the file; readers skip the
    /// line as a comment.
    pub fn error(self, message: &str) -> Result<(), HarnessError> {
        let path = self.path;
        let mut file = self.inner.into_inner().map_err(|e| HarnessError::io(&path, e.error()))?;
        writeln!(file, "# error: {}", message.replace('\n', " ")).map_err(|e| HarnessError::io(&path, e))?;
        file.flush().map_err(|e| HarnessError::io(&path, e))
    }
}

pub fn write_csv(path: &Path, records: &[ConvergenceRecord]) -> Result<(), HarnessError> {
    let mut w = CsvWriter::create(path)?;
    for r in records {
        w.push(r)?;
    }
    Ok(())
}

/// Reads a CSV written by [`CsvWriter`]; error lines are skipped.
pub fn parse_csv(text: &str) -> Result<Vec<ConvergenceRecord>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| HarnessError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(HarnessError::Csv(format!("unexpected header '{}'", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| HarnessError::Csv(e.to_string()))?;
        let f = |i: usize| -> Result<f64, HarnessError> {
            row[i].parse().map_err(|_| HarnessError::Csv(format!("bad number '{}'", &row[i])))
        };
        let u = |i: usize| -> Result<usize, HarnessError> {
            row[i].parse().map_err(|_| HarnessError::Csv(format!("bad integer '{}'", &row[i])))
        };
        out.push(ConvergenceRecord {
            iteration: u(0)?,
            dof: u(1)?,
            e_a: f(2)?,
            e_2: f(3)?,
            residual_total: f(4)?,
            lambda_min: f(5)?,
            wall_ms: f(6)?,
        });
    }
    Ok(out)
}

/// Gnuplot script drawing `e_a` against DOF on a log scale, one curve per
/// `(label, csv path)`.
pub fn plot_script(runs: &[(String, String)], title: &str) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set logscale y\n");
    s.push_str("set format y '10^{%L}'\n");
    s.push_str("set xlabel 'DOF'\n");
    s.push_str("set ylabel 'relative energy error e_a'\n");
    s.push_str(&format!("set title '{}'\n", title.replace('\'', "")));
    s.push_str("set key top right\n");
    let curves: Vec<String> = runs
        .iter()
        .map(|(label, path)| {
            format!("'{}' using 2:3 skip 1 with linespoints title '{}'", path.replace('\'', ""), label.replace('\'', ""))
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&curves.join(", \\\n     "));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize) -> ConvergenceRecord {
        ConvergenceRecord {
            iteration: i,
            dof: 81 + i,
            e_a: 0.6071 / (i + 1) as f64,
            e_2: 1.0 / 3.0,
            residual_total: 1e-300,
            lambda_min: f64::NAN,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn one_record_gives_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/run.csv");
        write_csv(&path, &[record(0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,81,6.0709999999999997e-1,"));
    }

    #[test]
    fn error_line_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let mut w = CsvWriter::create(&path).unwrap();
        w.push(&record(0)).unwrap();
        w.error("coarse matrix\nis singular").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("# error: coarse matrix is singular\n"));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].e_a, record(0).e_a);
    }

    #[test]
    fn plot_has_one_curve_per_run() {
        let runs: Vec<(String, String)> = (1..=5).map(|k| (format!("{k} initial"), format!("b{k}.csv"))).collect();
        let s = plot_script(&runs, "initial basis");
        assert_eq!(s.matches("with linespoints").count(), 5);
        assert!(s.contains("set logscale y"));
    }

    proptest! {
        #[test]
        fn columns_round_trip(
            e in proptest::num::f64::POSITIVE | proptest::num::f64::ZERO,
            r in proptest::num::f64::NORMAL,
            l in proptest::num::f64::ANY,
            it in 0usize..1000, dof in 0usize..100000,
        ) {
            let rec = ConvergenceRecord { iteration: it, dof, e_a: e, e_2: e / 3.0, residual_total: r, lambda_min: l, wall_ms: 1.5 };
            let text = format!("{CSV_HEADER}\n{}\n", rec.fields().join(","));
            let back = parse_csv(&text).unwrap()[0];
            prop_assert_eq!(back.iteration, it);
            prop_assert_eq!(back.dof, dof);
            prop_assert_eq!(back.e_a.to_bits(), rec.e_a.to_bits());
            prop_assert_eq!(back.e_2.to_bits(), rec.e_2.to_bits());
            prop_assert_eq!(back.residual_total.to_bits(), rec.residual_total.to_bits());
            prop_assert!(back.lambda_min.to_bits() == rec.lambda_min.to_bits() || (l.is_nan() && back.lambda_min.is_nan()));
        }
    }
}
