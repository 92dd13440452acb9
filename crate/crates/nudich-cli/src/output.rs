//! Report and CSV writing.

use std::path::Path;

use anyhow::Context;
use serde_json::Value;

/// One CSV file: a header and string rows, or bytes already written elsewhere.
pub struct Table {
    pub name: &'static str,
    body: Body,
}

enum Body {
    Rows { header: Vec<String>, rows: Vec<Vec<String>> },
    Raw(Vec<u8>),
}

impl Table {
    pub fn new(name: &'static str, header: &[&str]) -> Self {
        Table { name, body: Body::Rows { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() } }
    }

    pub fn raw(name: &'static str, bytes: Vec<u8>) -> Self {
        Table { name, body: Body::Raw(bytes) }
    }

    pub fn push(&mut self, row: Vec<String>) {
        if let Body::Rows { rows, .. } = &mut self.body {
            rows.push(row);
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(self.name);
        match &self.body {
            Body::Raw(bytes) => std::fs::write(&path, bytes)?,
            Body::Rows { header, rows } => {
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(header)?;
                for r in rows {
                    w.write_record(r)?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

/// Shortest round-trip decimal; exponent form outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Pretty JSON with sorted keys (serde_json's default map is ordered).
pub fn write_report(dir: &Path, report: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    let p = dir.join("report.json");
    std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_round_trips() {
        for v in [0.0, 1.5, -2.25e-9, 3.0e20, 0.1, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(0.5), "0.5");
        assert_eq!(num(1e-10), "1e-10");
        assert_eq!(opt(None), "");
    }

    #[test]
    fn empty_table_keeps_its_header() {
        let dir = tempfile::tempdir().unwrap();
        Table::new("ratios.csv", &["t", "s", "stable_ratio", "unstable_ratio"]).write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("ratios.csv")).unwrap();
        assert_eq!(text, "t,s,stable_ratio,unstable_ratio\n");
    }
}
