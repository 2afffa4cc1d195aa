//! Config-file support. The file is a flat JSON object whose keys mirror
//! long flag names; precedence is CLI flag > config file > built-in default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    map: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        match value {
            Value::Object(map) => Ok(ConfigFile { map }),
            _ => bail!("config file {} must be a JSON object", path.display()),
        }
    }

    pub fn f64(&self, key: &str, flag: Option<f64>, default: f64) -> f64 {
        flag.or_else(|| self.map.get(key).and_then(Value::as_f64))
            .unwrap_or(default)
    }

    pub fn usize(&self, key: &str, flag: Option<usize>, default: usize) -> usize {
        flag.or_else(|| self.map.get(key).and_then(Value::as_u64).map(|v| v as usize))
            .unwrap_or(default)
    }

    pub fn usize_opt(&self, key: &str, flag: Option<usize>) -> Option<usize> {
        flag.or_else(|| self.map.get(key).and_then(Value::as_u64).map(|v| v as usize))
    }

    pub fn f64_opt(&self, key: &str, flag: Option<f64>) -> Option<f64> {
        flag.or_else(|| self.map.get(key).and_then(Value::as_f64))
    }

    pub fn string_opt(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.map.get(key).and_then(Value::as_str).map(str::to_string))
    }
}
