//! Configuration loading with `--set section.key=value` overrides applied
//! on top of the file.

use std::path::Path;

use auvic_core::experiment::ExperimentConfig;
use toml::{Table, Value};

use crate::CliError;

pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply(&mut table, o)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), Value::Integer(s as i64));
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `a.b.c=value` override. Values are read as TOML literals and
/// fall back to plain strings.
pub fn apply(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override '{spec}' has an empty key")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override '{spec}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
