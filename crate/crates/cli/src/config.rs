use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::usage;

/// Parses `key=value`. The value is read as JSON when it parses, otherwise
/// as a bare string, so `--set task=multilabel` works without quoting.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(format!("bad key `{k}`"));
    }
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), v))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| anyhow!("`{key}`: `{part}` is not an array index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("`{key}`: index {idx} out of range (length {len})"))?
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new())),
            _ => bail!("`{key}`: `{part}` is not inside an object"),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("keys are nonempty")
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Default config, overlaid with the JSON file if given, then with each
/// override in order. Type errors name the offending field.
pub fn load<C: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<C> {
    let v = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(usage(format!("config {} must be a JSON object", p.display())));
            }
            v
        }
        None => Value::Object(Map::new()),
    };
    let mut base = serde_json::to_value(C::default()).context("serializing defaults")?;
    merge(&mut base, v);
    let mut v = base;
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone()).map_err(|e| usage(format!("--set {e}")))?;
    }
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        usage(format!("invalid config at `{field}`: {}", e.into_inner()))
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).context("serializing JSON")?;
    s.push('\n');
    Ok(s)
}
