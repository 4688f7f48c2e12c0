//! Plain-text key=value configuration with dotted section names.
//! Unknown keys are hard errors so a typo cannot silently change an
//! experiment.

use std::collections::BTreeMap;

#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, String> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value, got `{line}`", n + 1))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(format!("config line {}: empty key", n + 1));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(format!("config line {}: duplicate key `{key}`", n + 1));
            }
        }
        Ok(Config { map })
    }

    /// Reject any key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), String> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(format!(
                    "unknown config key `{key}` (allowed: {})",
                    allowed.join(", ")
                ));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str) -> Result<String, String> {
        self.get(key)
            .map(|s| s.to_string())
            .ok_or_else(|| format!("missing required config key `{key}`"))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("config key `{key}`: bad integer `{v}`")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("config key `{key}`: bad integer `{v}`")),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("config key `{key}`: bad number `{v}`")),
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, String> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| format!("config key `{key}`: bad number `{s}`"))
                })
                .collect(),
        }
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, String> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| format!("config key `{key}`: bad integer `{s}`"))
                })
                .collect(),
        }
    }

    /// The fully resolved map, for the manifest.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.map.clone()
    }
}
