//! TOML config loading with dotted-path `--set key=value` overrides.
//! Unknown keys are rejected with the offending key named; absent files or
//! keys fall back to documented defaults.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses a config file (all fields optional) and applies `--set`
/// overrides, then deserializes into the target config type.
pub fn parse_config<T: DeserializeOwned + Default>(
    path: Option<&Path>,
    sets: &[String],
) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for set in sets {
        apply_set(&mut table, set)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(e.to_string()))
}

/// Applies one `dotted.path=value` override, creating intermediate tables.
pub fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set expects key=value, got '{set}'")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config("--set key must be non-empty"));
    }
    let value = parse_value(raw.trim());
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            break;
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("--set path '{key}' crosses a non-table value at '{part}'"))
        })?;
    }
    Ok(())
}

/// Interprets the right-hand side as TOML (number, bool, array, quoted
/// string); bare words fall back to strings.
fn parse_value(raw: &str) -> toml::Value {
    let candidate = format!("v = {raw}");
    if let Ok(t) = candidate.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
