//! Classifies requests as analytics or not.
//!
//! A known-host list is consulted first; requests to unknown hosts are then
//! scanned for tell-tale attribute keys. Hosts found by the keyword scan are
//! remembered for the rest of the run.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::{normalize_key, Value};
use crate::request::ParsedRequest;

/// The bundled host list.
pub const DEFAULT_HOSTS_JSON: &str = include_str!("../data/analytics_hosts.json");

/// One entry of the host-list file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostRecord {
    pub host: String,
    pub library: String,
}

#[derive(Debug, Default)]
pub struct AnalyticsDomainDb {
    exact: HashMap<String, String>,
    /// Patterns with a leading dot, matched as suffixes.
    suffixes: Vec<(String, String)>,
    learned: RwLock<BTreeSet<String>>,
}

impl AnalyticsDomainDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a db from records. Duplicate hosts keep the first entry.
    pub fn from_records(records: impl IntoIterator<Item = HostRecord>) -> Self {
        let mut db = Self::new();
        for r in records {
            db.insert(r.host, r.library);
        }
        db
    }

    fn insert(&mut self, host: String, library: String) {
        let host = host.to_ascii_lowercase();
        if host.starts_with('.') {
            if !self.suffixes.iter().any(|(h, _)| *h == host) {
                self.suffixes.push((host, library));
            }
        } else {
            self.exact.entry(host).or_insert(library);
        }
    }

    pub fn default_hosts() -> Self {
        Self::parse(DEFAULT_HOSTS_JSON, "bundled host list").expect("bundled host list parses")
    }

    /// Loads a JSON array of `{"host": ..., "library": ...}` records.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::new());
        }
        let raw: Vec<&RawValue> = serde_json::from_str(text)
            .map_err(|e| Error::config(source_name, format!("malformed host list: {e}")))?;
        let mut records = Vec::with_capacity(raw.len());
        for item in raw {
            let line = line_of(text, item.get());
            let record: HostRecord = serde_json::from_str(item.get()).map_err(|e| {
                Error::config(source_name, format!("line {line}: invalid host record: {e}"))
            })?;
            let host = record.host.trim();
            if host.trim_start_matches('.').is_empty()
                || host.contains(|c: char| c.is_whitespace() || c == '/' || c == ':')
            {
                return Err(Error::config(
                    source_name,
                    format!("line {line}: invalid host {:?}", record.host),
                ));
            }
            records.push(HostRecord {
                host: host.to_owned(),
                library: record.library,
            });
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.suffixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Library name for a listed host, matching exactly or on a dotted suffix.
    pub fn library_for(&self, host: &str) -> Option<&str> {
        let host = host.to_ascii_lowercase();
        if let Some(lib) = self.exact.get(&host) {
            return Some(lib);
        }
        self.suffixes
            .iter()
            .find(|(suffix, _)| host.ends_with(suffix.as_str()))
            .map(|(_, lib)| lib.as_str())
    }

    pub fn is_listed(&self, host: &str) -> bool {
        self.library_for(host).is_some()
    }

    pub fn is_learned(&self, host: &str) -> bool {
        self.learned
            .read()
            .expect("learned hosts lock")
            .contains(&host.to_ascii_lowercase())
    }

    /// Records a host found by the keyword heuristic. Returns true if new.
    pub fn learn(&self, host: &str) -> bool {
        let host = host.to_ascii_lowercase();
        if self.is_listed(&host) {
            return false;
        }
        self.learned.write().expect("learned hosts lock").insert(host)
    }

    pub fn learned_hosts(&self) -> Vec<String> {
        self.learned
            .read()
            .expect("learned hosts lock")
            .iter()
            .cloned()
            .collect()
    }

    /// Writes learned hosts as a host-list file (library `"learned"`).
    pub fn save_learned(&self, path: &Path) -> Result<()> {
        let records: Vec<_> = self
            .learned_hosts()
            .into_iter()
            .map(|host| HostRecord {
                host,
                library: "learned".into(),
            })
            .collect();
        let text = serde_json::to_string_pretty(&records).expect("host records serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Merges a previously saved learned-hosts file.
    pub fn load_learned(&self, path: &Path) -> Result<()> {
        let saved = Self::load(path)?;
        let mut learned = self.learned.write().expect("learned hosts lock");
        learned.extend(saved.exact.into_keys());
        Ok(())
    }
}

fn line_of(text: &str, fragment: &str) -> usize {
    let offset = (fragment.as_ptr() as usize).saturating_sub(text.as_ptr() as usize);
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Attribute keys that betray analytics payloads, compared after [`normalize_key`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    keywords: HashSet<String>,
}

impl KeywordSet {
    pub const DEFAULT: [&'static str; 7] = [
        "device-name",
        "device-id",
        "device-info",
        "event-type",
        "event-info",
        "event",
        "event-name",
    ];

    pub fn new<S: AsRef<str>>(keywords: impl IntoIterator<Item = S>) -> Self {
        KeywordSet {
            keywords: keywords
                .into_iter()
                .map(|k| normalize_key(k.as_ref()))
                .collect(),
        }
    }

    pub fn matches(&self, key: &str) -> bool {
        self.keywords.contains(&normalize_key(key))
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        Self::new(Self::DEFAULT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchedBy {
    Host,
    Keyword,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Analytics(MatchedBy),
    NonAnalytics,
}

impl Verdict {
    pub fn is_analytics(self) -> bool {
        matches!(self, Verdict::Analytics(_))
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Analytics(MatchedBy::Host) => "analytics(host)",
            Verdict::Analytics(MatchedBy::Keyword) => "analytics(keyword)",
            Verdict::NonAnalytics => "non-analytics",
        }
    }
}

/// True when any body key (at any depth) or query parameter name is a keyword.
pub fn has_keyword(request: &ParsedRequest, kw: &KeywordSet) -> bool {
    if request.url.query_keys().iter().any(|k| kw.matches(k)) {
        return true;
    }
    let Some(body) = request.body.structured() else {
        return false;
    };
    let mut found = false;
    let mut check = |k: &str| found |= kw.matches(k);
    match &body.tree {
        Value::Tree(t) => t.visit_keys(&mut check),
        Value::List(items) => {
            for item in items {
                if let Value::Tree(t) = item {
                    t.visit_keys(&mut check);
                }
            }
        }
        _ => {}
    }
    found
}

/// Classifies `request` against a db snapshot. Pure: does not learn.
pub fn classify(request: &ParsedRequest, db: &AnalyticsDomainDb, kw: &KeywordSet) -> Verdict {
    let host = request.host();
    if db.is_listed(host) || db.is_learned(host) {
        Verdict::Analytics(MatchedBy::Host)
    } else if has_keyword(request, kw) {
        Verdict::Analytics(MatchedBy::Keyword)
    } else {
        Verdict::NonAnalytics
    }
}

/// [`classify`] plus learning of keyword-matched hosts.
#[derive(Debug, Default)]
pub struct Detector {
    pub db: AnalyticsDomainDb,
    pub keywords: KeywordSet,
}

impl Detector {
    pub fn new(db: AnalyticsDomainDb, keywords: KeywordSet) -> Self {
        Detector { db, keywords }
    }

    pub fn detect(&self, request: &ParsedRequest) -> Verdict {
        let verdict = classify(request, &self.db, &self.keywords);
        if verdict == Verdict::Analytics(MatchedBy::Keyword) && self.db.learn(request.host()) {
            tracing::info!(host = request.host(), "learned analytics host");
        }
        verdict
    }
}
