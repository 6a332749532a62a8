//! Result tables rendered as aligned text and CSV, with provenance lines.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// `key=value` lines such as configuration and checkpoint hashes.
    pub provenance: Vec<(String, String)>,
    /// Trend checks and other findings, printed under the table.
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            provenance: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn provenance(&mut self, key: &str, value: impl Into<String>) {
        self.provenance.push((key.to_string(), value.into()));
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Cell at (`row`, column named `col`).
    pub fn cell(&self, row: usize, col: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == col)?;
        self.rows.get(row).and_then(|r| r.get(c)).map(String::as_str)
    }

    /// Cell parsed as a number; percentages and `inf` are accepted.
    pub fn number(&self, row: usize, col: &str) -> Option<f64> {
        let raw = self.cell(row, col)?;
        match raw.strip_suffix('%') {
            Some(p) => p.parse::<f64>().ok().map(|v| v / 100.0),
            None => raw.parse().ok(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let fmt_row = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("{}\n", self.title);
        out += &fmt_row(&self.columns);
        out.push('\n');
        out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ");
        out.push('\n');
        for row in &self.rows {
            out += &fmt_row(row);
            out.push('\n');
        }
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        for (k, v) in &self.provenance {
            out += &format!("{k}: {v}\n");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::new();
        for (k, v) in &self.provenance {
            out += &format!("# {k}={v}\n");
        }
        out += &self.columns.iter().map(|c| esc(c)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.rows {
            out += &row.iter().map(|c| esc(c)).collect::<Vec<_>>().join(",");
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Percentage with four decimals, e.g. `1.2500%`.
pub fn pct(v: f64) -> String {
    format!("{:.4}%", v * 100.0)
}

/// Fixed-point with `digits` decimals; infinities print as `inf`.
pub fn fixed(v: f64, digits: usize) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.digits$}")
    }
}
