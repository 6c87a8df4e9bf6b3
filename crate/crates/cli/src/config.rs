use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Overlay the keys of a JSON config file on `base`. Nested objects merge
/// key by key; keys unknown to `base` are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(base) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, patch, "").with_context(|| format!("applying {}", path.display()))?;
    serde_json::from_value(merged).with_context(|| format!("applying {}", path.display()))
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => bail!("unknown config key {key:?}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
