//! Line-delimited metrics plus a human-readable summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde_json::{Map, Value};

#[derive(Default)]
pub struct Report {
    lines: Vec<Value>,
    rows: Vec<(String, String)>,
    notes: Vec<String>,
}

/// JSON number for a metric; non-finite values are refused.
pub fn finite(name: &str, v: f64) -> Result<Value> {
    if !v.is_finite() {
        bail!("metric {name} is not finite ({v})");
    }
    Ok(Value::from(v))
}

impl Report {
    /// One metrics line; `fields` must already be finite.
    pub fn line(&mut self, fields: Vec<(&str, Value)>) {
        let mut m = Map::new();
        for (k, v) in fields {
            m.insert(k.to_string(), v);
        }
        self.lines.push(Value::Object(m));
    }

    pub fn metric(&mut self, name: &str, value: f64) -> Result<()> {
        self.line(vec![("metric", Value::from(name)), ("value", finite(name, value)?)]);
        self.rows.push((name.to_string(), format!("{value:.3}")));
        Ok(())
    }

    pub fn row(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.rows.push((name.into(), value.into()));
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }

    /// Writes `metrics.jsonl` and `summary.txt` into `dir` and prints the table.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        for l in &self.lines {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        fs::write(dir.join("metrics.jsonl"), text)?;
        let table = self.table();
        fs::write(dir.join("summary.txt"), &table)?;
        print!("{table}");
        Ok(())
    }
}
