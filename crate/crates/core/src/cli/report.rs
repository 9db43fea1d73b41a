//! Rectangular reports written as CSV or aligned text.

use std::path::Path;

use crate::archive::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Formats a number with nine significant digits, shortest form.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl Report {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) -> Result<()> {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        if row.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "report row has {} fields, header has {}",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.columns).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.columns);
        for r in &self.rows {
            out += &line(r);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        let columns = r
            .headers()
            .map_err(fail)?
            .iter()
            .map(String::from)
            .collect();
        let mut report = Self::new::<String>(Vec::new());
        report.columns = columns;
        for rec in r.records() {
            let rec = rec.map_err(fail)?;
            report.push(rec.iter().map(String::from))?;
        }
        Ok(report)
    }
}

pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Text => report.to_text(),
    };
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Report::parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new(["label", "ap"]);
        for (l, v) in [("0", 0.5), ("1", 1.0 / 3.0), ("4+", 0.25), ("mean", 0.1)] {
            r.push([l.to_string(), fmt_num(v)]).unwrap();
        }
        let p = dir.path().join("ap.csv");
        emit_report(&r, ReportFormat::Csv, &p).unwrap();
        assert_eq!(read_report(&p).unwrap(), r);
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("label,ap\n0,0.5\n1,0.333333333\n"));

        let empty = Report::new(["a", "b"]);
        emit_report(&empty, ReportFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n");
        assert_eq!(read_report(&p).unwrap(), empty);
    }

    #[test]
    fn text_table_aligns() {
        let mut r = Report::new(["dim", "r_squared"]);
        r.push(["3", "0.25"]).unwrap();
        assert_eq!(r.to_text(), "dim  r_squared\n  3       0.25\n");
        assert!(r.push(["1"]).is_err());
    }

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(123456789012.0), "123456789000");
        assert_eq!(fmt_num(-2.5e-7), "-0.00000025");
        assert_eq!(fmt_opt(None), "");
    }
}
