use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use toml::{Table as TomlTable, Value};

use crate::bessel::BesselFile;
use crate::conjugate::ConjugateArgs;
use crate::hedge::SuperhedgeArgs;
use crate::report::{self, Check, Comparison, Summary, Table};
use crate::tree_duality::TreeDualityArgs;
use crate::{CliError, Context, RunOutput};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// TOML file naming `command` and holding a section of that name.
    #[arg(long)]
    pub base: PathBuf,
    /// `NAME=V1,V2,...`; NAME is a key of the command section, a dotted
    /// path, or a key of one of its sub-tables.
    #[arg(long)]
    pub axis: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<Value>,
}

fn scalar(text: &str) -> Value {
    let t = text.trim();
    if let Ok(i) = t.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = t.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = t.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(t.to_string())
    }
}

pub fn parse_axis(spec: &str) -> Result<Axis, CliError> {
    let (name, list) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Parse(format!("axis {spec:?}: expected NAME=V1,V2,...")))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(CliError::Parse(format!("axis {spec:?}: empty name")));
    }
    let values: Vec<Value> = list.split(',').filter(|v| !v.trim().is_empty()).map(scalar).collect();
    if values.is_empty() {
        return Err(CliError::Parse(format!("axis {name}: no values")));
    }
    Ok(Axis {
        name: name.to_string(),
        values,
    })
}

/// Path of keys inside the command section that `name` refers to.
pub fn resolve_axis(section: &TomlTable, name: &str) -> Result<Vec<String>, CliError> {
    if section.contains_key(name) {
        return Ok(vec![name.to_string()]);
    }
    if name.contains('.') {
        let path: Vec<String> = name.split('.').map(str::to_string).collect();
        let mut table = section;
        for (i, key) in path.iter().enumerate() {
            match table.get(key) {
                Some(Value::Table(t)) if i + 1 < path.len() => table = t,
                Some(_) if i + 1 == path.len() => return Ok(path),
                _ => break,
            }
        }
        return Err(CliError::Parse(format!("axis {name}: no such key in the base config")));
    }
    let hits: Vec<&String> = section
        .iter()
        .filter_map(|(k, v)| match v {
            Value::Table(t) if t.contains_key(name) => Some(k),
            _ => None,
        })
        .collect();
    match hits.as_slice() {
        [one] => Ok(vec![one.to_string(), name.to_string()]),
        [] => Err(CliError::Parse(format!("axis {name}: no such key in the base config"))),
        many => Err(CliError::Parse(format!(
            "axis {name} is ambiguous; use one of {}",
            many.iter().map(|k| format!("{k}.{name}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(section: &mut TomlTable, path: &[String], value: Value) {
    let mut table = section;
    for key in &path[..path.len() - 1] {
        table = table
            .get_mut(key)
            .and_then(Value::as_table_mut)
            .expect("axis path resolved against this table");
    }
    table.insert(path[path.len() - 1].clone(), value);
}

fn cell_command(command: &str, section: TomlTable, base_dir: &Path) -> Result<crate::Command, CliError> {
    let parse = |e: toml::de::Error| CliError::Parse(format!("[{command}]: {e}"));
    Ok(match command {
        "tree-duality" => {
            let mut a: TreeDualityArgs = section.try_into().map_err(parse)?;
            a.resolve_paths(base_dir);
            crate::Command::TreeDuality(a)
        }
        "superhedge" => {
            let mut a: SuperhedgeArgs = section.try_into().map_err(parse)?;
            a.resolve_paths(base_dir);
            crate::Command::Superhedge(a)
        }
        "conjugate" => {
            let mut a: ConjugateArgs = section.try_into().map_err(parse)?;
            a.resolve_paths(base_dir);
            crate::Command::Conjugate(a)
        }
        other => return Err(CliError::Parse(format!("sweep cannot run command {other:?}"))),
    })
}

fn run_cell(command: &str, section: TomlTable, base_dir: &Path, ctx: &Context) -> Result<RunOutput, CliError> {
    report::ensure_dir(&ctx.out)?;
    let output = if command == "bessel" {
        let file: BesselFile = section
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Parse(format!("[bessel]: {e}")))?;
        crate::bessel::run_file(&file, ctx)?
    } else {
        let cmd = cell_command(command, section, base_dir)?;
        return crate::run_command(&cmd, ctx);
    };
    report::write_json(&ctx.out, "summary.json", &output.summary)?;
    report::write_metadata(&ctx.out, command)?;
    Ok(output)
}

fn display(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn run(args: &SweepArgs, ctx: &Context) -> Result<RunOutput, CliError> {
    let text = crate::read_text(&args.base)?;
    let base: TomlTable = text
        .parse()
        .map_err(|e| CliError::Parse(format!("{}: {e}", args.base.display())))?;
    let command = base
        .get("command")
        .and_then(Value::as_str)
        .ok_or_else(|| CliError::Parse("base config needs a string `command`".into()))?
        .to_string();
    let section = base
        .get(&command)
        .and_then(Value::as_table)
        .ok_or_else(|| CliError::Parse(format!("base config has no [{command}] section")))?;
    let axis = parse_axis(&args.axis)?;
    let path = resolve_axis(section, &axis.name)?;
    let base_dir = args.base.parent().unwrap_or(Path::new("."));

    let mut checks = Vec::new();
    let mut cells = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    let mut outputs: Vec<(String, Result<RunOutput, CliError>)> = Vec::new();
    for (i, value) in axis.values.iter().enumerate() {
        let mut cell = section.clone();
        set_path(&mut cell, &path, value.clone());
        let cell_ctx = Context {
            out: ctx.out.join(format!("cell_{i:03}")),
            seed: ctx.seed,
            tolerances: ctx.tolerances.clone(),
        };
        let result = run_cell(&command, cell, base_dir, &cell_ctx);
        if let Err(e) = &result {
            let summary = Summary::from_error(&command, ctx.seed, e);
            let _ = report::ensure_dir(&cell_ctx.out);
            let _ = report::write_json(&cell_ctx.out, "summary.json", &summary);
        }
        if let Ok(out) = &result {
            for (k, _) in &out.row {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
        outputs.push((display(value), result));
    }

    let mut header = vec!["axis_value", "status", "exit_code", "failures"];
    header.extend(columns.iter().map(String::as_str));
    let mut table = Table::new(&header);
    let mut u_by_x = Vec::new();
    for (i, (label, result)) in outputs.iter().enumerate() {
        let (status, code, failures, row) = match result {
            Ok(out) => (
                out.summary.status.clone(),
                out.summary.exit_code,
                out.summary.failures.join(";"),
                out.row.clone(),
            ),
            Err(e) => ("error".to_string(), e.exit_code(), e.to_string(), Vec::new()),
        };
        checks.push(Check::new(
            format!("cell_{i:03}:{}={label}", axis.name),
            code as f64,
            Comparison::AtMost,
            0.0,
        ));
        let mut line = vec![label.clone(), status.clone(), code.to_string(), failures.clone()];
        for c in &columns {
            line.push(row.iter().find(|(k, _)| k == c).map(|(_, v)| v.clone()).unwrap_or_default());
        }
        table.push(line);
        if command == "tree-duality" && path == ["x"] {
            let get = |k: &str| row.iter().find(|(n, _)| n == k).and_then(|(_, v)| v.parse::<f64>().ok());
            if let (Some(x), Some(u)) = (get("x"), get("u_of_x")) {
                u_by_x.push((x, u));
            }
        }
        cells.push(json!({ "axis_value": label, "status": status, "exit_code": code, "failures": failures }));
    }
    if u_by_x.len() >= 2 {
        u_by_x.sort_by(|a, b| a.0.total_cmp(&b.0));
        let worst = u_by_x.windows(2).map(|w| w[0].1 - w[1].1).fold(f64::NEG_INFINITY, f64::max);
        checks.push(Check::new("u_increasing_in_x", worst, Comparison::Below, 0.0));
    }
    report::write_csv(&ctx.out, "sweep.csv", &table)?;

    let inputs = json!({ "base": args.base, "axis": axis.name, "command": command, "path": path });
    let results = json!({ "cells": cells });
    Ok(RunOutput {
        summary: Summary::from_checks("sweep", ctx.seed, inputs, checks, results),
        row: Vec::new(),
    })
}
