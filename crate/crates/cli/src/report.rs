use std::fmt;
use std::io::Write;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::{Command, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            // shortest round-trip representation, always with '.'
            Cell::Float(v) => write!(f, "{v:?}"),
            Cell::Bool(v) => write!(f, "{v}"),
            Cell::Text(v) => f.write_str(v),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.header.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let j = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| &r[j]).collect())
    }
}

/// One asserted property. Numeric checks carry the measured value and its
/// bound; structural ones only the verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value: Some(value),
            limit: Some(limit),
            passed: value <= limit,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value: Some(value),
            limit: Some(limit),
            passed: value >= limit,
        }
    }

    pub fn holds(name: impl Into<String>, passed: bool) -> Self {
        Self {
            name: name.into(),
            value: None,
            limit: None,
            passed,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}", self.name)?;
        if let (Some(v), Some(l)) = (self.value, self.limit) {
            write!(f, " (value {v:.3e}, limit {l:.3e})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: Command,
    pub seed: u64,
    pub sizes: Map<String, Value>,
    pub table: Table,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: Command, seed: u64, table: Table) -> Self {
        Self {
            command,
            seed,
            sizes: Map::new(),
            table,
            checks: Vec::new(),
        }
    }

    pub fn size(mut self, name: &str, value: impl Serialize) -> Self {
        self.sizes.insert(name.to_owned(), json!(value));
        self
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.table.header)?;
        for row in &self.table.rows {
            w.write_record(row.iter().map(Cell::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let records: Vec<Value> = self
            .table
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = self
                    .table
                    .header
                    .iter()
                    .zip(row)
                    .map(|(k, v)| ((*k).to_owned(), json!(v)))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        json!({
            "meta": {
                "command": self.command,
                "seed": self.seed,
                "sizes": self.sizes,
                "version": crate::VERSION,
                "checks": self.checks,
            },
            "records": records,
        })
    }

    pub fn write<W: Write>(&self, format: Format, mut out: W) -> Result<()> {
        match format {
            Format::Csv => self.write_csv(out),
            Format::Json => {
                serde_json::to_writer_pretty(&mut out, &self.to_json())?;
                writeln!(out)?;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut t = Table::new(&["step", "value", "name"]);
        t.push(vec![0usize.into(), 0.5.into(), "a".into()]);
        t.push(vec![1usize.into(), 1e-12.into(), "b,c".into()]);
        let mut r = Report::new(Command::Params, 7, t).size("N", 4);
        r.checks.push(Check::at_most("x", 1.0, 2.0));
        r
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,value,name\n0,0.5,a\n1,1e-12,\"b,c\"\n");
    }

    #[test]
    fn json_mirrors_csv() {
        let v = sample().to_json();
        assert_eq!(v["meta"]["seed"], 7);
        assert_eq!(v["meta"]["command"], "params");
        assert_eq!(v["meta"]["sizes"]["N"], 4);
        let recs = v["records"].as_array().unwrap();
        assert_eq!(recs.len(), 2);
        let keys: Vec<&String> = recs[0].as_object().unwrap().keys().collect();
        assert_eq!(keys, ["step", "value", "name"]);
        assert_eq!(recs[1]["value"], 1e-12);
    }

    #[test]
    fn check_directions() {
        assert!(Check::at_most("a", 1.0, 1.0).passed);
        assert!(!Check::at_most("a", f64::NAN, 1.0).passed);
        assert!(Check::at_least("b", 3.0, 2.0).passed);
        assert!(!Check::holds("c", false).passed);
    }
}
