//! Config files merged under command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Recursively overlay `over` onto `base`; objects merge key by key, every
/// other value replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

pub fn load_file(path: Option<&Path>) -> CliResult<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Usage(format!("config file {} must hold a JSON object", path.display())));
    }
    Ok(v)
}

/// Flag overrides as a sparse JSON object.
#[derive(Debug, Default)]
pub struct Overrides(Value);

impl Overrides {
    pub fn new() -> Self {
        Self(Value::Object(Map::new()))
    }

    pub fn set<T: Serialize>(&mut self, path: &[&str], value: Option<T>) -> &mut Self {
        let Some(value) = value else {
            return self;
        };
        let mut cur = &mut self.0;
        for key in &path[..path.len() - 1] {
            cur = cur
                .as_object_mut()
                .expect("object")
                .entry(*key)
                .or_insert_with(|| Value::Object(Map::new()));
        }
        cur.as_object_mut()
            .expect("object")
            .insert(path[path.len() - 1].to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn into_value(self) -> Value {
        self.0
    }
}

pub fn has_path(v: &Value, path: &[&str]) -> bool {
    let mut cur = v;
    for k in path {
        match cur.get(k) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    !cur.is_null()
}

/// `defaults`, then the config file, then the flags.
pub struct Resolved<T> {
    pub config: T,
    /// Config file and flags without defaults, to check what the user gave.
    pub explicit: Value,
}

pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Value, flags: Overrides) -> CliResult<Resolved<T>> {
    let mut explicit = file;
    merge(&mut explicit, flags.into_value());
    let mut full = serde_json::to_value(defaults).expect("serializable");
    merge(&mut full, explicit.clone());
    let config = serde_json::from_value(full).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    Ok(Resolved { config, explicit })
}

pub fn require(explicit: &Value, path: &[&str], flag: &str) -> CliResult<()> {
    if has_path(explicit, path) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} is required (on the command line or in --config)")))
    }
}
