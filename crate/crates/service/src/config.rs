//! Service configuration: a TOML file with environment overrides.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! audit_log = "var/audit.jsonl"
//!
//! [thresholds]
//! allow_threshold = 1.0
//! deny_threshold = 0.5
//!
//! [backend]
//! kind = "scripted"
//! scripts = ["fixtures/generic_scripts.jsonl"]
//!
//! [metrics]
//! corpus = "bundled"
//! ```
//!
//! Overrides: `PERMGATE_BIND`, `PERMGATE_AUDIT_LOG`,
//! `PERMGATE_ALLOW_THRESHOLD`, `PERMGATE_DENY_THRESHOLD`,
//! `PERMGATE_REMOTE_ENDPOINT`.

use std::path::{Path, PathBuf};

use permgate_core::backend::RemoteConfig;
use permgate_core::engine::ThresholdConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSelection {
    /// Replays recorded completions; paths are relative to the config root.
    Scripted {
        #[serde(default)]
        scripts: Vec<PathBuf>,
        /// Also load the bundled generic decisions.
        #[serde(default)]
        include_bundled: bool,
    },
    Remote(RemoteConfig),
}

/// Where `/v1/metrics/summary` gets its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// `"bundled"` or a corpus directory.
    pub corpus: String,
    /// Generic models whose recorded decisions are compared with the
    /// majority; defaults to the bundled models for the bundled corpus.
    #[serde(default)]
    pub generic_models: Vec<String>,
    /// Script files holding the generic decisions (non-bundled corpora).
    #[serde(default)]
    pub generic_scripts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default = "default_seed")]
    pub example_seed: u64,
    pub backend: BackendSelection,
    #[serde(default)]
    pub metrics: Option<MetricsConfig>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_seed() -> u64 {
    permgate_core::engine::EngineConfig::default().example_seed
}

impl ServiceConfig {
    /// Scripted backend over the bundled generic decisions, no audit log.
    pub fn bundled() -> Self {
        Self {
            bind: default_bind(),
            audit_log: None,
            thresholds: ThresholdConfig::default(),
            example_seed: default_seed(),
            backend: BackendSelection::Scripted {
                scripts: Vec::new(),
                include_bundled: true,
            },
            metrics: Some(MetricsConfig {
                corpus: "bundled".into(),
                generic_models: Vec::new(),
                generic_scripts: Vec::new(),
            }),
        }
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(path, &text)
    }

    /// Applies overrides from `lookup` (normally `std::env::var`).
    pub fn apply_env(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        if let Some(bind) = lookup("PERMGATE_BIND") {
            self.bind = bind;
        }
        if let Some(path) = lookup("PERMGATE_AUDIT_LOG") {
            self.audit_log = Some(path.into());
        }
        let number = |var: &'static str| -> Result<Option<f64>, ConfigError> {
            lookup(var)
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| ConfigError::Env {
                        var,
                        message: e.to_string(),
                    })
                })
                .transpose()
        };
        let allow = number("PERMGATE_ALLOW_THRESHOLD")?;
        let deny = number("PERMGATE_DENY_THRESHOLD")?;
        if allow.is_some() || deny.is_some() {
            self.thresholds = ThresholdConfig::new(
                allow.unwrap_or(self.thresholds.allow_threshold()),
                deny.unwrap_or(self.thresholds.deny_threshold()),
            )
            .map_err(|e| ConfigError::Env {
                var: "PERMGATE_*_THRESHOLD",
                message: e.to_string(),
            })?;
        }
        if let Some(endpoint) = lookup("PERMGATE_REMOTE_ENDPOINT") {
            match &mut self.backend {
                BackendSelection::Remote(remote) => remote.endpoint = endpoint,
                BackendSelection::Scripted { .. } => {
                    return Err(ConfigError::Env {
                        var: "PERMGATE_REMOTE_ENDPOINT",
                        message: "backend kind is not `remote`".into(),
                    })
                }
            }
        }
        Ok(self)
    }

    /// Resolves relative paths against `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        if let Some(p) = &mut self.audit_log {
            join(p);
        }
        if let BackendSelection::Scripted { scripts, .. } = &mut self.backend {
            scripts.iter_mut().for_each(join);
        }
        if let Some(m) = &mut self.metrics {
            m.generic_scripts.iter_mut().for_each(join);
            if m.corpus != "bundled" {
                let mut p = PathBuf::from(&m.corpus);
                join(&mut p);
                m.corpus = p.to_string_lossy().into_owned();
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    const SAMPLE: &str = r#"
bind = "0.0.0.0:9000"
audit_log = "var/audit.jsonl"

[thresholds]
allow_threshold = 0.9
deny_threshold = 0.6

[backend]
kind = "scripted"
scripts = ["a.jsonl"]

[metrics]
corpus = "bundled"
"#;

    #[test]
    fn parses_file() {
        let c = ServiceConfig::parse(Path::new("x.toml"), SAMPLE).unwrap();
        assert_eq!(c.bind, "0.0.0.0:9000");
        assert_eq!(c.thresholds, ThresholdConfig::new(0.9, 0.6).unwrap());
        let c = c.rooted(Path::new("/srv"));
        assert_eq!(
            c.audit_log.as_deref(),
            Some(Path::new("/srv/var/audit.jsonl"))
        );
        match c.backend {
            BackendSelection::Scripted { scripts, .. } => {
                assert_eq!(scripts, vec![PathBuf::from("/srv/a.jsonl")])
            }
            _ => panic!(),
        }
    }

    #[test]
    fn env_overrides() {
        let env: HashMap<&str, &str> = [
            ("PERMGATE_BIND", "127.0.0.1:1"),
            ("PERMGATE_DENY_THRESHOLD", "0.7"),
        ]
        .into();
        let c = ServiceConfig::parse(Path::new("x"), SAMPLE)
            .unwrap()
            .apply_env(|k| env.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(c.bind, "127.0.0.1:1");
        assert_eq!(c.thresholds, ThresholdConfig::new(0.9, 0.7).unwrap());

        let bad = ServiceConfig::parse(Path::new("x"), SAMPLE)
            .unwrap()
            .apply_env(|k| (k == "PERMGATE_ALLOW_THRESHOLD").then(|| "1.5".to_owned()));
        assert!(bad.is_err());
        let wrong_kind = ServiceConfig::parse(Path::new("x"), SAMPLE)
            .unwrap()
            .apply_env(|k| (k == "PERMGATE_REMOTE_ENDPOINT").then(|| "http://x".to_owned()));
        assert!(wrong_kind.is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ServiceConfig::parse(
            Path::new("x"),
            "bogus = 1\n[backend]\nkind = \"scripted\"\n"
        )
        .is_err());
    }
}
