//! `key = value` configuration files with `[section]`s, plus environment
//! overrides of the form `ROBUSTGAN__SECTION__KEY=value`.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "ROBUSTGAN__";

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format { what: "config", reason: e.to_string() }
}

/// Parses a value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `PREFIX SECTION__KEY = value` pairs. Names are lowercased; nested
/// sections are separated by `__`.
pub fn apply_overrides<I, K, V>(table: &mut Table, vars: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut applied = Vec::new();
    for (k, v) in vars {
        let Some(path) = k.as_ref().strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let parts: Vec<String> = path.split("__").map(str::to_ascii_lowercase).collect();
        if parts.iter().any(String::is_empty) {
            return Err(format_err(format!("malformed override {}", k.as_ref())));
        }
        let (key, sections) = parts.split_last().expect("non-empty");
        let mut cur = &mut *table;
        for s in sections {
            cur = cur
                .entry(s.clone())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .ok_or_else(|| format_err(format!("override {} crosses a non-table key", k.as_ref())))?;
        }
        cur.insert(key.clone(), parse_value(v.as_ref()));
        applied.push(parts.join("."));
    }
    Ok(applied)
}

/// Parses text, applies overrides and deserializes.
pub fn parse_with_overrides<T, I, K, V>(text: &str, vars: I) -> Result<T>
where
    T: DeserializeOwned,
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut table: Table = text.parse().map_err(format_err)?;
    apply_overrides(&mut table, vars)?;
    Value::Table(table).try_into().map_err(format_err)
}

/// Reads a config file, applying overrides from the process environment.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_with_overrides(&text, std::env::vars())
}

/// Serializes a config back to text.
pub fn to_text<T: serde::Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(format_err)
}
