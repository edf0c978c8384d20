use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::VlmError;

/// End index (exclusive) of the balanced object starting at `start`, honouring
/// string literals and escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` region of `raw` that parses as a JSON object.
/// Code fences and surrounding prose are skipped over.
pub fn extract_json_object(raw: &str) -> Result<Map<String, Value>, VlmError> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(off) = raw[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&raw[start..end]) {
                return Ok(map);
            }
        }
        from = start + 1;
    }
    Err(VlmError::Extraction(format!("no JSON object in {:?}", preview(raw))))
}

fn preview(raw: &str) -> String {
    raw.chars().take(80).collect()
}

fn coerce(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Looks up `key` exactly, then case-insensitively.
pub(crate) fn lookup<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key).or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

/// Extracts the first JSON object and returns every field as a string,
/// failing when any of `required_keys` is absent.
pub fn extract_json(raw: &str, required_keys: &[&str]) -> Result<BTreeMap<String, String>, VlmError> {
    let map = extract_json_object(raw)?;
    let mut out: BTreeMap<String, String> = map.iter().map(|(k, v)| (k.clone(), coerce(v))).collect();
    for key in required_keys {
        match lookup(&map, key) {
            Some(v) => {
                out.insert((*key).to_string(), coerce(v));
            }
            None => return Err(VlmError::Extraction(format!("missing key {key:?} in {:?}", preview(raw)))),
        }
    }
    Ok(out)
}
