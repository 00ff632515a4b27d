//! Run manifests: the resolved config, the squeeze direction and the
//! metrics and artifacts a command produced, written as pretty JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sqdm_core::PrincipalDirection;

use crate::config::{Overrides, ResolvedConfig};
use crate::CliError;

/// Floats in manifests and CSVs: 17 significant digits, so they parse back exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Result<f64, CliError> {
    s.parse().map_err(|_| CliError::Parse(format!("bad float {s:?} in direction record")))
}

/// Principal direction as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecord {
    pub n: usize,
    pub components: Vec<String>,
    pub explained_variance_ratio: String,
    /// Per-channel mean removed before PCA (empty when not estimated from data).
    pub mean: Vec<String>,
}

impl DirectionRecord {
    pub fn from_direction(d: &PrincipalDirection) -> Self {
        Self {
            n: d.dim(),
            components: d.v().iter().copied().map(fmt_f64).collect(),
            explained_variance_ratio: fmt_f64(d.explained_variance_ratio()),
            mean: d.mean().iter().copied().map(fmt_f64).collect(),
        }
    }

    pub fn to_direction(&self) -> Result<PrincipalDirection, CliError> {
        let v = self.components.iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>, _>>()?;
        if v.len() != self.n {
            return Err(CliError::Parse(format!("direction record has n = {} but {} components", self.n, v.len())));
        }
        let mean = self.mean.iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>, _>>()?;
        let evr = parse_f64(&self.explained_variance_ratio)?;
        Ok(PrincipalDirection::from_unit(v)?.with_diagnostics(evr, mean))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub command: String,
    pub version: String,
    pub config: ResolvedConfig,
    pub direction: Option<DirectionRecord>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, run_id: String, config: &ResolvedConfig) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            run_id,
            timestamp,
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            direction: None,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), serde_json::Value::String(fmt_f64(value)));
    }

    pub fn metric_text(&mut self, key: &str, value: impl Into<String>) {
        self.metrics.insert(key.into(), serde_json::Value::String(value.into()));
    }

    pub fn artifact(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.into(), path.to_path_buf());
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    /// The stored config as an override layer.
    pub fn config_overrides(&self) -> Overrides {
        let value = serde_json::to_value(&self.config).expect("config serializes");
        serde_json::from_value(value).expect("resolved config is a valid override set")
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_record_round_trips_exactly() {
        let d = PrincipalDirection::new(vec![0.3, -0.1, 0.7]).unwrap().with_diagnostics(0.81, vec![0.1, 0.2, -0.3]);
        let rec = DirectionRecord::from_direction(&d);
        assert_eq!(rec.components.len(), 3);
        let back = rec.to_direction().unwrap();
        assert_eq!(back, d);
        assert_eq!(DirectionRecord::from_direction(&back), rec);
    }

    #[test]
    fn manifest_config_round_trips_as_overrides() {
        let cfg = ResolvedConfig { grid: vec![-0.1, 0.3], s0: -0.4, ..Default::default() };
        let m = RunManifest::new("train", "x".into(), &cfg);
        let mut rebuilt = ResolvedConfig::default();
        m.config_overrides().apply(&mut rebuilt).unwrap();
        assert_eq!(rebuilt, cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }
}
