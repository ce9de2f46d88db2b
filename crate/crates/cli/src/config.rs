//! Configuration resolution: defaults, then a JSON file of flat dotted
//! keys, then command-line flags, with the effective values recorded for
//! the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::{usage, CliResult, Failure};

/// Every key any subcommand understands. A configuration file may carry
/// keys for several subcommands at once; each subcommand reads only its
/// own, but unknown keys are rejected up front.
const KNOWN_KEYS: &[&str] = &[
    "command",
    "out",
    "seed",
    "observations",
    "subjects",
    "domains",
    "feature",
    "covariates",
    "family",
    "grid.points",
    "lmoments.order",
    "lmoments.method",
    "soqfr.basis",
    "soqfr.basis_size",
    "soqfr.lambda",
    "soqfr.lambda_lo",
    "soqfr.lambda_hi",
    "soqfr.lambda_count",
    "fgam.basis_q_size",
    "fgam.basis_p_size",
    "fgam.lambda_lo",
    "fgam.lambda_hi",
    "fgam.lambda_count",
    "fgam.slices",
    "soqfr_l.order",
    "gam_l.order",
    "gam_l.basis_size",
    "hist.bins",
    "hist.bin_range",
    "hist.basis_size",
    "hist.lambda",
    "jive.order",
    "jive.joint_rank",
    "jive.individual_ranks",
    "jive.permutations",
    "jive.alpha",
    "cv.k",
    "cv.repeats",
    "cv.models",
    "simulate.scenario",
    "simulate.subjects",
];

/// The merged configuration. Getters with a default record the value they
/// resolved to, so after a subcommand has read its parameters the map is
/// the complete effective configuration and can be replayed verbatim.
#[derive(Debug, Default)]
pub struct Resolved {
    map: BTreeMap<String, Value>,
}

impl Resolved {
    /// Load the configuration file if given. A run manifest also works:
    /// when the root object has a `config` member that is an object, that
    /// member is read instead of the root.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let root: Value = qdist::io::read_json(path).map_err(Failure::Core)?;
            let obj = root.as_object().ok_or_else(|| {
                usage(format!(
                    "configuration file {} must hold a JSON object",
                    path.display()
                ))
            })?;
            let obj = match obj.get("config") {
                Some(Value::Object(inner)) => inner,
                _ => obj,
            };
            for (key, value) in obj {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(usage(format!("unknown configuration key `{key}`")));
                }
                if matches!(value, Value::Object(_) | Value::Array(_)) {
                    return Err(usage(format!("configuration key `{key}` must be a scalar")));
                }
                map.insert(key.clone(), value.clone());
            }
        }
        Ok(Resolved { map })
    }

    pub fn into_map(self) -> BTreeMap<String, Value> {
        self.map
    }

    // ---- flag overrides (None leaves the configured value in place) ----

    pub fn set_str(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.map.insert(key.into(), Value::String(v));
        }
    }

    pub fn set_path(&mut self, key: &str, value: Option<PathBuf>) {
        self.set_str(key, value.map(|p| p.to_string_lossy().into_owned()));
    }

    pub fn set_usize(&mut self, key: &str, value: Option<usize>) {
        if let Some(v) = value {
            self.map.insert(key.into(), Value::from(v as u64));
        }
    }

    pub fn set_u64(&mut self, key: &str, value: Option<u64>) {
        if let Some(v) = value {
            self.map.insert(key.into(), Value::from(v));
        }
    }

    pub fn set_f64(&mut self, key: &str, value: Option<f64>) {
        if let Some(v) = value {
            self.map.insert(key.into(), Value::from(v));
        }
    }

    /// Record a value the run resolved on its own (detected family, the
    /// full covariate list, a scenario's seed).
    pub fn record_str(&mut self, key: &str, value: &str) {
        self.map.insert(key.into(), Value::String(value.into()));
    }

    pub fn record_u64(&mut self, key: &str, value: u64) {
        self.map.insert(key.into(), Value::from(value));
    }

    // ---- typed getters ----

    pub fn opt_str(&self, key: &str) -> CliResult<Option<String>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(usage(format!(
                "configuration key `{key}` must be a string, got {other}"
            ))),
        }
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> CliResult<String> {
        match self.opt_str(key)? {
            Some(s) => Ok(s),
            None => {
                self.record_str(key, default);
                Ok(default.into())
            }
        }
    }

    pub fn opt_usize(&self, key: &str) -> CliResult<Option<usize>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => match n.as_u64() {
                Some(v) => Ok(Some(v as usize)),
                None => Err(usage(format!(
                    "configuration key `{key}` must be a nonnegative integer, got {n}"
                ))),
            },
            Some(other) => Err(usage(format!(
                "configuration key `{key}` must be a nonnegative integer, got {other}"
            ))),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> CliResult<usize> {
        match self.opt_usize(key)? {
            Some(v) => Ok(v),
            None => {
                self.record_u64(key, default as u64);
                Ok(default)
            }
        }
    }

    pub fn opt_u64(&self, key: &str) -> CliResult<Option<u64>> {
        Ok(self.opt_usize(key)?.map(|v| v as u64))
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> CliResult<u64> {
        match self.opt_u64(key)? {
            Some(v) => Ok(v),
            None => {
                self.record_u64(key, default);
                Ok(default)
            }
        }
    }

    pub fn opt_f64(&self, key: &str) -> CliResult<Option<f64>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => match n.as_f64() {
                Some(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(usage(format!(
                    "configuration key `{key}` must be a finite number, got {n}"
                ))),
            },
            Some(other) => Err(usage(format!(
                "configuration key `{key}` must be a number, got {other}"
            ))),
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> CliResult<f64> {
        match self.opt_f64(key)? {
            Some(v) => Ok(v),
            None => {
                self.map.insert(key.into(), Value::from(default));
                Ok(default)
            }
        }
    }

    pub fn opt_path(&self, key: &str) -> CliResult<Option<PathBuf>> {
        Ok(self.opt_str(key)?.map(PathBuf::from))
    }

    /// A path that must be present, by flag or configuration key.
    pub fn require_path(&self, key: &str, flag: &str) -> CliResult<PathBuf> {
        self.opt_path(key)?.ok_or_else(|| {
            usage(format!("missing {key} file: pass {flag} or set the `{key}` key"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &tempfile::TempDir, text: &str) -> PathBuf {
        let path = dir.path().join("config.json");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn flags_override_file_values_and_defaults_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&dir, r#"{"grid.points": 50, "feature": "speed"}"#);
        let mut cfg = Resolved::load(Some(&path)).unwrap();
        cfg.set_usize("grid.points", Some(200));
        assert_eq!(cfg.usize_or("grid.points", 100).unwrap(), 200);
        assert_eq!(cfg.str_or("feature", "gait").unwrap(), "speed");
        assert_eq!(cfg.usize_or("lmoments.order", 4).unwrap(), 4);
        let map = cfg.into_map();
        assert_eq!(map["lmoments.order"], Value::from(4u64));
        assert_eq!(map["grid.points"], Value::from(200u64));
    }

    #[test]
    fn unknown_keys_and_wrong_types_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&dir, r#"{"grid.resolution": 50}"#);
        let err = Resolved::load(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("grid.resolution"));

        let path = write_config(&dir, r#"{"grid.points": "fifty"}"#);
        let cfg = Resolved::load(Some(&path)).unwrap();
        assert!(cfg.opt_usize("grid.points").is_err());

        let path = write_config(&dir, r#"{"seed": -3}"#);
        let cfg = Resolved::load(Some(&path)).unwrap();
        assert!(cfg.opt_u64("seed").is_err());
    }

    #[test]
    fn a_run_manifest_is_read_through_its_config_member() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            &dir,
            r#"{"config": {"seed": 9, "feature": "cadence"}, "seed": 9,
                "versions": {"x": "1"}, "timings": {"total_ms": 3}}"#,
        );
        let cfg = Resolved::load(Some(&path)).unwrap();
        assert_eq!(cfg.opt_u64("seed").unwrap(), Some(9));
        assert_eq!(cfg.opt_str("feature").unwrap().as_deref(), Some("cadence"));
    }
}
