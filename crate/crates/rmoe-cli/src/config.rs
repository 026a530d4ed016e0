//! Flat key=value override files for sweeps. One `key = value` pair per
//! line; `#` starts a comment; keys use the flag spelling without the
//! leading dashes (e.g. `experts = 1,5,10`).

use std::collections::BTreeMap;

/// Parse an override file. Never panics on malformed input.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", idx + 1))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", idx + 1));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", idx + 1));
        }
    }
    Ok(map)
}
