//! `key = value` configuration files layered over typed defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

/// One raw `key=value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Unresolved assignments in precedence order (later wins).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub entries: Vec<Entry>,
}

fn split_assignment(line: &str, origin: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected key=value, got {line:?}")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key")));
    }
    Ok((key.to_string(), v.trim().to_string()))
}

impl RawConfig {
    /// Parses a config file: one `key = value` per line, `#` starts a comment.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn parse_str(text: &str, name: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{name}:{}", i + 1);
            let (key, value) = split_assignment(line, &origin)?;
            entries.push(Entry { key, value, origin });
        }
        Ok(Self { entries })
    }

    /// Config file (if any) followed by command-line overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => Self::parse_file(p)?,
            None => Self::default(),
        };
        for o in overrides {
            raw.push_override(o)?;
        }
        Ok(raw)
    }

    pub fn push_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = split_assignment(assignment, "override")?;
        self.entries.push(Entry {
            key,
            value,
            origin: "override".into(),
        });
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            origin: "command line".into(),
        });
    }

    /// Latest value assigned to `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }
}

fn coerce(default: &Value, text: &str, entry: &Entry) -> Result<Value> {
    let bad = |what: &str| {
        Error::Config(format!(
            "{}: {}: expected {what}, got {text:?}",
            entry.origin, entry.key
        ))
    };
    Ok(match default {
        Value::Bool(_) => match text {
            "true" | "1" | "yes" => Value::Bool(true),
            "false" | "0" | "no" => Value::Bool(false),
            _ => return Err(bad("a boolean")),
        },
        Value::Number(n) => {
            if n.is_f64() {
                let v: f64 = text.parse().map_err(|_| bad("a number"))?;
                serde_json::Number::from_f64(v)
                    .map(Value::Number)
                    .ok_or_else(|| bad("a finite number"))?
            } else if n.is_u64() {
                Value::from(
                    text.parse::<u64>()
                        .map_err(|_| bad("a non-negative integer"))?,
                )
            } else {
                Value::from(text.parse::<i64>().map_err(|_| bad("an integer"))?)
            }
        }
        Value::String(_) => Value::String(text.to_string()),
        _ => match text {
            "none" | "null" | "" => Value::Null,
            _ => serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string())),
        },
    })
}

/// Applies `raw` on top of `defaults`. Every key must be a field of `T`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, raw: &RawConfig) -> Result<T> {
    let mut map = match serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))? {
        Value::Object(m) => m,
        _ => {
            return Err(Error::Config(
                "configuration defaults are not a record".into(),
            ))
        }
    };
    for entry in &raw.entries {
        let default = map.get(&entry.key).ok_or_else(|| {
            Error::Config(format!("{}: unknown key {:?}", entry.origin, entry.key))
        })?;
        let v = coerce(default, &entry.value, entry)?;
        map.insert(entry.key.clone(), v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "none".into(),
        other => other.to_string(),
    }
}

/// Every effective value as sorted `key = value` lines.
pub fn render_resolved<T: Serialize>(config: &T) -> Result<String> {
    let map: Map<String, Value> =
        match serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))? {
            Value::Object(m) => m,
            _ => return Err(Error::Config("configuration is not a record".into())),
        };
    let mut keys: Vec<&String> = map.keys().collect();
    keys.sort();
    Ok(keys
        .into_iter()
        .map(|k| format!("{k} = {}\n", render_value(&map[k])))
        .collect())
}

pub fn write_resolved<T: Serialize>(config: &T, out_dir: &Path) -> Result<()> {
    let text = render_resolved(config)?;
    write_atomic(&out_dir.join(RESOLVED_CONFIG_FILE), text.as_bytes())
}
