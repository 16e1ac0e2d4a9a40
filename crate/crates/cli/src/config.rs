//! Layered configuration: defaults, then an optional JSON file, then flags.
//! Every leaf value remembers which layer set it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Layered<T> {
    pub value: T,
    sources: BTreeMap<String, &'static str>,
    file: Option<String>,
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl<T: Serialize + DeserializeOwned + Default> Layered<T> {
    /// Defaults overlaid with `path`, if given. Unknown keys are rejected by
    /// the config types themselves.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut sources = BTreeMap::new();
        let default = serde_json::to_value(T::default()).map_err(CliError::other)?;
        let mut keys = Vec::new();
        leaves("", &default, &mut keys);
        for k in keys {
            sources.insert(k, "default");
        }
        let Some(path) = path else {
            return Ok(Self {
                value: T::default(),
                sources,
                file: None,
            });
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let value: T = serde_json::from_value(raw.clone())
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut keys = Vec::new();
        leaves("", &raw, &mut keys);
        for k in keys {
            // a file may replace a whole sub-object with null or a scalar
            sources.retain(|existing, _| !(existing.starts_with(&format!("{k}.")) || existing == &k));
            sources.insert(k, "file");
        }
        Ok(Self {
            value,
            sources,
            file: Some(path.display().to_string()),
        })
    }

    /// Applies a flag value when present.
    pub fn flag<V>(&mut self, key: &str, v: Option<V>, set: impl FnOnce(&mut T, V)) {
        if let Some(v) = v {
            set(&mut self.value, v);
            self.sources.retain(|existing, _| !existing.starts_with(&format!("{key}.")));
            self.sources.insert(key.to_string(), "flag");
        }
    }

    /// Like [`Layered::flag`] for boolean switches that only ever turn something on.
    pub fn switch(&mut self, key: &str, on: bool, set: impl FnOnce(&mut T)) {
        self.flag(key, on.then_some(()), |t, ()| set(t));
    }

    /// Effective values plus the layer each came from.
    pub fn provenance(&self) -> CliResult<Value> {
        Ok(json!({
            "config": serde_json::to_value(&self.value).map_err(CliError::other)?,
            "config_file": self.file,
            "sources": self.sources,
        }))
    }

    /// Logs every value that did not come from the defaults.
    pub fn echo(&self, command: &str) {
        let changed: Vec<String> = self
            .sources
            .iter()
            .filter(|(_, s)| **s != "default")
            .map(|(k, s)| format!("{k} ({s})"))
            .collect();
        if changed.is_empty() {
            log::info!("{command}: default configuration");
        } else {
            log::info!("{command}: overrides {}", changed.join(", "));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        a: f64,
        b: u32,
    }

    #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        inner: Inner,
        name: String,
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let f = write(r#"{"inner": {"a": 2.0, "b": 7}}"#);
        let mut l = Layered::<Outer>::load(Some(f.path())).unwrap();
        l.flag("inner.a", Some(5.0), |o, v| o.inner.a = v);
        l.flag("name", None::<String>, |o, v| o.name = v);
        assert_eq!(l.value.inner, Inner { a: 5.0, b: 7 });
        let p = l.provenance().unwrap();
        assert_eq!(p["sources"]["inner.a"], "flag");
        assert_eq!(p["sources"]["inner.b"], "file");
        assert_eq!(p["sources"]["name"], "default");
        assert_eq!(p["config"]["inner"]["a"], 5.0);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let f = write(r#"{"inner": {"c": 1}}"#);
        let err = Layered::<Outer>::load(Some(f.path())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Layered::<Outer>::load(Some(Path::new("/nonexistent/cfg.json"))).is_err());
    }
}
