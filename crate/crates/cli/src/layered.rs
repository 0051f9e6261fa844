//! Config layering: defaults < JSON file < flags < `HCOG_` environment.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "HCOG_";

#[derive(Debug)]
pub struct LayerError(pub String);

impl std::fmt::Display for LayerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Recursive object merge. Single-key objects whose key changes are replaced
/// whole, so switching an enum variant does not leave the old one behind.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let variant_switch = b.len() == 1 && p.len() == 1 && b.keys().next() != p.keys().next();
            if variant_switch {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Builds `{"a": {"b": value}}` from the path `a.b`.
pub fn nested(path: &[&str], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, key| {
        let mut m = Map::new();
        m.insert((*key).to_string(), acc);
        Value::Object(m)
    })
}

/// Parses an override value as JSON, falling back to a bare string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `HCOG_STEPS__COARSE=5` becomes `{"steps": {"coarse": 5}}`.
pub fn env_patches<I>(vars: I) -> Vec<(String, Value)>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let lower = rest.to_lowercase();
            let path: Vec<&str> = lower.split("__").collect();
            let name = path.join(".");
            Some((name, nested(&path, parse_scalar(&v))))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Deserializes with the failing key path in the error message.
pub fn finish<T: DeserializeOwned>(value: Value) -> Result<T, LayerError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        LayerError(format!("config key `{path}`: {}", e.into_inner()))
    })
}

pub fn layered<T>(file: Option<Value>, flags: Vec<Value>, env: Vec<(String, Value)>) -> Result<T, LayerError>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut v = serde_json::to_value(T::default()).expect("serializable");
    if let Some(f) = file {
        if !f.is_object() {
            return Err(LayerError("config file must hold a JSON object".into()));
        }
        merge(&mut v, f);
    }
    for f in flags {
        merge(&mut v, f);
    }
    for (_, e) in env {
        merge(&mut v, e);
    }
    finish(v)
}
