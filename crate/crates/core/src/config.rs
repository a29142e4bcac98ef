//! Operator configuration, loaded from a JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::DEFAULT_MIN_LEN;
use crate::error::{Error, Result};
use crate::model::PrivacyLevel;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ca_out_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Apps missing from this map run at NONE.
    #[serde(default)]
    pub per_app_levels: BTreeMap<String, PrivacyLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_list_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgh_rules_path: Option<PathBuf>,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub tls: TlsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_out_path: Option<PathBuf>,
    /// Client IP address to app name, used when a request has no `X-App-Name`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub client_apps: BTreeMap<String, String>,
    /// Send all upstream traffic to this `host:port` instead of the real origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_stub: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_hosts_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_snapshot_path: Option<PathBuf>,
    /// Overrides the built-in detection keywords.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_owned()
}

fn default_min_len() -> usize {
    DEFAULT_MIN_LEN
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: default_listen(),
            per_app_levels: BTreeMap::new(),
            host_list_path: None,
            dgh_rules_path: None,
            min_len: DEFAULT_MIN_LEN,
            rng_seed: None,
            tls: TlsConfig::default(),
            report_out_path: None,
            client_apps: BTreeMap::new(),
            upstream_stub: None,
            learned_hosts_path: None,
            buffer_snapshot_path: None,
            keywords: None,
        }
    }
}

impl Config {
    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut cfg = Self::parse(&text, &name)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| {
            Error::config(
                source_name,
                format!("line {} column {}: {e}", e.line(), e.column()),
            )
        })?;
        cfg.validate(source_name)?;
        Ok(cfg)
    }

    pub fn validate(&self, source_name: &str) -> Result<()> {
        if self.host_list_path.is_none() {
            return Err(Error::config(source_name, "missing required field `host_list_path`"));
        }
        if self.dgh_rules_path.is_none() {
            return Err(Error::config(source_name, "missing required field `dgh_rules_path`"));
        }
        if self.min_len == 0 {
            return Err(Error::config(source_name, "`min_len` must be at least 1"));
        }
        if self.tls.enabled && self.tls.ca_out_path.is_none() {
            return Err(Error::config(
                source_name,
                "`tls.ca_out_path` is required when `tls.enabled` is true",
            ));
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.host_list_path);
        fix(&mut self.dgh_rules_path);
        fix(&mut self.tls.ca_out_path);
        fix(&mut self.report_out_path);
        fix(&mut self.learned_hosts_path);
        fix(&mut self.buffer_snapshot_path);
    }

    pub fn level_for(&self, app: &str) -> PrivacyLevel {
        self.per_app_levels.get(app).copied().unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Parses an `APP=LEVEL` override.
pub fn parse_level_override(s: &str) -> Result<(String, PrivacyLevel)> {
    let (app, level) = s
        .split_once('=')
        .ok_or_else(|| Error::config("--level", format!("expected APP=LEVEL, got {s:?}")))?;
    if app.is_empty() {
        return Err(Error::config("--level", format!("empty app name in {s:?}")));
    }
    let level = level
        .parse()
        .map_err(|e: Error| Error::config("--level", e.to_string()))?;
    Ok((app.to_owned(), level))
}
