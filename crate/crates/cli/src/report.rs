//! Summary schema, tolerance tables and artifact writers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let pass = match comparison {
            Comparison::AtMost => value <= threshold,
            Comparison::Below => value < threshold,
            Comparison::AtLeast => value >= threshold,
        };
        Self {
            name: name.into(),
            value,
            threshold,
            comparison,
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub seed: Option<u64>,
    pub inputs: Value,
    pub checks: Vec<Check>,
    pub failures: Vec<String>,
    pub results: Value,
}

impl Summary {
    pub fn from_checks(command: &str, seed: Option<u64>, inputs: Value, checks: Vec<Check>, results: Value) -> Self {
        let failures: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
        let exit_code = if failures.is_empty() { 0 } else { 1 };
        Self {
            command: command.to_string(),
            status: if exit_code == 0 { "pass" } else { "fail" }.to_string(),
            exit_code,
            seed,
            inputs,
            checks,
            failures,
            results,
        }
    }

    pub fn from_error(command: &str, seed: Option<u64>, error: &CliError) -> Self {
        Self {
            command: command.to_string(),
            status: "error".to_string(),
            exit_code: error.exit_code(),
            seed,
            inputs: Value::Null,
            checks: Vec::new(),
            failures: vec![format!("error: {error}")],
            results: Value::Null,
        }
    }
}

/// Check thresholds with user overrides (`--tol NAME=VALUE`).
#[derive(Debug, Clone)]
pub struct Tolerances {
    values: BTreeMap<String, f64>,
}

impl Tolerances {
    pub fn new(defaults: &[(&str, f64)], overrides: &[(String, f64)]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, f64> =
            defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (name, value) in overrides {
            if !values.contains_key(name) {
                let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
                return Err(CliError::Parse(format!(
                    "unknown tolerance {name:?}; this command accepts {}",
                    known.join(", ")
                )));
            }
            if !(*value > 0.0 && value.is_finite()) {
                return Err(CliError::Parse(format!("tolerance {name} must be positive, got {value}")));
            }
            values.insert(name.clone(), *value);
        }
        Ok(Self { values })
    }

    pub fn get(&self, name: &str) -> f64 {
        self.values[name]
    }

    /// `value <= tolerance(name)` as a check.
    pub fn at_most(&self, name: &str, value: f64) -> Check {
        Check::new(name, value, Comparison::AtMost, self.get(name))
    }
}

pub fn parse_tolerance(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value: f64 = value.parse().map_err(|e| format!("{value:?}: {e}"))?;
    Ok((name.to_string(), value))
}

/// Shortest round-trip decimal form; identical input gives identical text.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn write_csv(dir: &Path, name: &str, table: &Table) -> Result<(), CliError> {
    let path = dir.join(name);
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize {name}: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    created: String,
    args: Vec<String>,
}

/// Run metadata; the only artifact carrying a timestamp.
pub fn write_metadata(dir: &Path, command: &str) -> Result<(), CliError> {
    write_json(
        dir,
        "metadata.json",
        &Metadata {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            created: chrono::Utc::now().to_rfc3339(),
            args: std::env::args().collect(),
        },
    )
}
