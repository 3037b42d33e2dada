use crate::Result;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

/// Rows of `paths.csv`: `path_index, step, time` followed by experiment columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathRows {
    /// Experiment-specific column names (after `path_index, step, time`).
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub path_index: usize,
    pub step: usize,
    pub time: f64,
    pub values: Vec<f64>,
}

impl PathRows {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: vec![] }
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub(super) fn write_csv(path: &Path, rows: &PathRows) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut line = String::from("path_index,step,time");
    for c in &rows.columns {
        line.push(',');
        line.push_str(c);
    }
    writeln!(out, "{line}")?;
    for row in &rows.rows {
        line.clear();
        write!(line, "{},{},{}", row.path_index, row.step, format_real(row.time)).expect("string write");
        for v in &row.values {
            line.push(',');
            line.push_str(&format_real(*v));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_through_text() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            let s = format_real(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(format_real(1.0), "1.0000000000000000e0");
    }
}
