//! Offline replay of recorded traffic through the pipeline.
//!
//! Input and output are JSON lines of [`ReplayRecord`]. Records of one app
//! are processed serially in file order; different apps run in parallel.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::RunReport;
use crate::pipeline::{Disposition, Engine};
use crate::request::{Headers, ParsedRequest, RequestUrl};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub app: String,
    pub method: String,
    pub url: String,
    #[serde(with = "header_map", default)]
    pub headers: Headers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_b64: Option<String>,
    pub timestamp: i64,
}

impl ReplayRecord {
    pub fn body_bytes(&self) -> Result<Vec<u8>> {
        match (&self.body, &self.body_b64) {
            (Some(_), Some(_)) => Err(Error::Decode("both `body` and `body_b64` set".into())),
            (Some(text), None) => Ok(text.as_bytes().to_vec()),
            (None, Some(b64)) => B64
                .decode(b64)
                .map_err(|e| Error::Decode(format!("body_b64: {e}"))),
            (None, None) => Ok(Vec::new()),
        }
    }

    /// Stores `bytes` as text when valid UTF-8, else as base64.
    pub fn set_body(&mut self, bytes: Vec<u8>) {
        match String::from_utf8(bytes) {
            Ok(text) => {
                self.body = Some(text);
                self.body_b64 = None;
            }
            Err(e) => {
                self.body = None;
                self.body_b64 = Some(B64.encode(e.into_bytes()));
            }
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Headers as a JSON object in wire order.
mod header_map {
    use serde::de::{MapAccess, Visitor};
    use serde::ser::SerializeMap;
    use serde::{Deserializer, Serializer};

    use crate::request::Headers;

    pub fn serialize<S: Serializer>(headers: &Headers, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(headers.len()))?;
        for (k, v) in headers {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Headers, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Headers;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an object of header names to values")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Headers, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, String>()? {
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        d.deserialize_map(V)
    }
}

/// Status returned by the upstream for one forwarded request.
pub trait Upstream: Sync {
    fn send(&self, record: &ReplayRecord, body: &[u8]) -> Result<u16>;
}

/// Accepts everything without sending.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimulatedUpstream;

impl Upstream for SimulatedUpstream {
    fn send(&self, _: &ReplayRecord, _: &[u8]) -> Result<u16> {
        Ok(200)
    }
}

struct Parsed<'a> {
    line: &'a str,
    record: ReplayRecord,
    request: ParsedRequest,
}

/// Parses all records, checking monotone timestamps per app. Indices in
/// errors are 1-based record numbers.
fn parse_records(input: &str) -> Result<Vec<Parsed<'_>>> {
    let mut last_ts: BTreeMap<String, i64> = BTreeMap::new();
    let mut out = Vec::new();
    for line in input.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len() + 1;
        let bad = |message: String| Error::Replay { index, message };
        let record: ReplayRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if record.app.is_empty() {
            return Err(bad("empty app name".into()));
        }
        if let Some(prev) = last_ts.insert(record.app.clone(), record.timestamp) {
            if record.timestamp < prev {
                return Err(bad(format!(
                    "timestamp {} precedes {prev} for app {:?}",
                    record.timestamp, record.app
                )));
            }
        }
        let url = RequestUrl::parse(&record.method, &record.url).map_err(|e| bad(e.to_string()))?;
        let body = record.body_bytes().map_err(|e| bad(e.to_string()))?;
        let request = ParsedRequest::new(record.app.clone(), url, record.headers.clone(), body);
        out.push(Parsed {
            line,
            record,
            request,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    /// Anonymized records, one JSON document per line, newline-terminated.
    pub output: String,
    pub report: RunReport,
}

/// Replays `input` through `engine`. Pass-through records are written as
/// their verbatim input line; removed events produce no line; injected
/// events precede their trigger.
pub fn run_replay(engine: &Engine, input: &str, upstream: &dyn Upstream) -> Result<ReplayOutput> {
    let records = parse_records(input)?;
    let mut by_app: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in records.iter().enumerate() {
        by_app.entry(p.record.app.as_str()).or_default().push(i);
    }

    let per_app: Vec<Vec<(usize, Vec<String>)>> = by_app
        .into_par_iter()
        .map(|(_, indices)| {
            indices
                .into_iter()
                .map(|i| replay_one(engine, &records[i], upstream).map(|lines| (i, lines)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut slots: Vec<Vec<String>> = vec![Vec::new(); records.len()];
    for (i, lines) in per_app.into_iter().flatten() {
        slots[i] = lines;
    }
    let mut output = String::new();
    for line in slots.into_iter().flatten() {
        output.push_str(&line);
        output.push('\n');
    }
    Ok(ReplayOutput {
        output,
        report: engine.report(),
    })
}

fn replay_one(engine: &Engine, p: &Parsed<'_>, upstream: &dyn Upstream) -> Result<Vec<String>> {
    let processed = engine.process(&p.request, p.record.timestamp);
    let app = p.record.app.as_str();
    let host = p.request.host();
    let analytics = processed.verdict.is_analytics();
    let action = processed.action_label();
    let mut lines = Vec::new();
    match processed.disposition {
        Disposition::Original => {
            let status = upstream.send(&p.record, &p.request.raw_body)?;
            if analytics {
                engine.record_forward(app, host, is_success(status));
            }
            lines.push(p.line.to_owned());
        }
        Disposition::Rewritten { requests, .. } => {
            for out in requests {
                let mut rec = ReplayRecord {
                    headers: out.headers,
                    timestamp: out.timestamp,
                    body: None,
                    body_b64: None,
                    ..p.record.clone()
                };
                let status = upstream.send(&rec, &out.body)?;
                engine.record_forward(app, host, is_success(status));
                rec.set_body(out.body);
                lines.push(rec.to_line());
            }
        }
    }
    tracing::debug!(
        app,
        host,
        verdict = processed.verdict.label(),
        action = %action,
        "replayed"
    );
    Ok(lines)
}

pub fn is_success(status: u16) -> bool {
    (200..300).contains(&status)
}
