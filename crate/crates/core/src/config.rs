//! JSON configs with defaults, file layering and dotted `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, SatError};

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

/// Sets `a.b.c` in `value`. The right-hand side is parsed as JSON, falling back to a string.
/// Only keys that already exist may be overridden.
pub fn apply_override(value: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| SatError::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let next = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(move |i| items.get_mut(i)),
            _ => None,
        };
        cur = next.ok_or_else(|| SatError::Config(format!("unknown config key {:?}", parts[..=n].join("."))))?;
    }
    *cur = parsed;
    Ok(())
}

/// Defaults, then the optional JSON file, then overrides in order.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<C> {
    let mut value = serde_json::to_value(C::default()).expect("serializable defaults");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| SatError::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| SatError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, patch);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| SatError::Config(e.to_string()))
}

/// Writes the resolved config as pretty JSON.
pub fn echo<C: Serialize>(config: &C, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(config).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| SatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        rate: f64,
        name: String,
    }

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Outer {
        epochs: usize,
        inner: Inner,
        sizes: Vec<usize>,
    }

    #[test]
    fn dotted_overrides_apply_after_defaults() {
        let c: Outer = resolve(None, &["inner.rate=0.5".into(), "inner.name=abc".into(), "epochs=3".into()]).unwrap();
        assert_eq!(c, Outer { epochs: 3, inner: Inner { rate: 0.5, name: "abc".into() }, sizes: vec![] });
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(resolve::<Outer>(None, &["inner.nope=1".into()]), Err(SatError::Config(_))));
        assert!(matches!(resolve::<Outer>(None, &["epochs".into()]), Err(SatError::Config(_))));
        assert!(matches!(resolve::<Outer>(None, &["epochs=\"x\"".into()]), Err(SatError::Config(_))));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"epochs": 7, "inner": {"rate": 2.0}}"#).unwrap();
        let c: Outer = resolve(Some(&p), &["inner.rate=3".into()]).unwrap();
        assert_eq!((c.epochs, c.inner.rate), (7, 3.0));
    }
}
