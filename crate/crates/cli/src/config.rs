//! Run configuration: a flat `key=value` file (with `#` comments) merged
//! with command-line `--key value` overrides, flags winning. Unknown keys
//! are rejected up front.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Every key any command understands.
const KNOWN_KEYS: &[&str] = &[
    // data
    "glucose_csv",
    "side_csv",
    "text_csv",
    "min_count",
    "min_bg",
    // output
    "out_dir",
    "model_dir",
    // windowing and labeling
    "window_len",
    "horizon",
    "policy",
    "hypo_mgdl",
    "hyper_mgdl",
    "gap_feature",
    // model
    "context_mode",
    "latent_dim",
    "max_iters",
    "rel_tol",
    "seed",
    "max_train_windows",
    "pooled",
    "l2",
    "kcca_reg",
    // evaluation
    "models",
    "split",
    "test_fraction",
    "signals",
    "min_bg_levels",
    // synthetic generation
    "users",
    "points",
    "latent_freq",
    "context_informative",
    "noise_sd",
    // prediction
    "steps",
];

/// A usage-level problem: bad key, bad value, missing requirement.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse a config file, then apply `--key value` overrides.
    pub fn load(
        config_path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, UsageError> {
        let mut values = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(UsageError(format!(
                        "{}:{}: expected key=value, got `{line}`",
                        path.display(),
                        lineno + 1
                    )));
                };
                let key = key.trim().to_string();
                Self::check_key(&key)?;
                values.insert(key, value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            Self::check_key(key)?;
            values.insert(key.clone(), value.clone());
        }
        Ok(RunConfig { values })
    }

    fn check_key(key: &str) -> Result<(), UsageError> {
        if KNOWN_KEYS.contains(&key) {
            Ok(())
        } else {
            Err(UsageError(format!("unknown config key `{key}`")))
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, UsageError> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| UsageError(format!("missing required key `{key}`")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, UsageError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| UsageError(format!("bad value for `{key}`: `{raw}`"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, UsageError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(UsageError(format!(
                "bad value for `{key}`: `{other}` (expected true|false)"
            ))),
        }
    }

    pub fn list_or(&self, key: &str, default: &str) -> Vec<String> {
        self.get(key)
            .unwrap_or(default)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Canonical `key=value` rendering of the resolved configuration; the
    /// provenance digest hashes this. Filesystem locations are excluded so
    /// the same run parameters digest identically wherever they execute.
    pub fn canonical(&self, command: &str) -> String {
        const PATH_KEYS: &[&str] = &["glucose_csv", "side_csv", "text_csv", "out_dir", "model_dir"];
        let mut out = format!("command={command}\n");
        for (k, v) in &self.values {
            if PATH_KEYS.contains(&k.as_str()) {
                continue;
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
