//! The per-request anonymization pipeline shared by the proxy and replay.

use std::collections::BTreeMap;

use crate::codec::{self, DecodedBody, StructuredBody};
use crate::config::Config;
use crate::detector::{classify, AnalyticsDomainDb, Detector, KeywordSet, Verdict};
use crate::dp::{EmittedRole, EventBuffer};
use crate::evaluator::{MetricsCollector, RunReport};
use crate::generalizer::{generalize_request, DghRuleSet};
use crate::model::{AnalyticsEvent, AnonymizationAction, AppHostKey, PrivacyLevel, Value};
use crate::request::{Headers, ParsedRequest};
use crate::Result;

/// One request to send upstream in place of the intercepted one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub headers: Headers,
    pub body: Vec<u8>,
    pub role: EmittedRole,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    /// Forward the request exactly as received.
    Original,
    /// Forward these requests in order. The client gets the response to
    /// `respond_with`, or a synthetic empty 200 when `None`.
    Rewritten {
        requests: Vec<Outbound>,
        respond_with: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Processed {
    pub verdict: Verdict,
    pub level: PrivacyLevel,
    pub actions: Vec<AnonymizationAction>,
    pub disposition: Disposition,
}

impl Processed {
    /// Log label for the DP outcome.
    pub fn action_label(&self) -> String {
        if self.actions.is_empty() {
            return "-".into();
        }
        let names: Vec<String> = self.actions.iter().map(ToString::to_string).collect();
        names.join("+")
    }
}

/// Detector, rules, histories and metrics for one running instance.
#[derive(Debug)]
pub struct Engine {
    pub detector: Detector,
    pub rules: DghRuleSet,
    pub buffer: EventBuffer,
    pub levels: BTreeMap<String, PrivacyLevel>,
    pub min_len: usize,
    pub seed: Option<u64>,
    pub metrics: MetricsCollector,
    /// Remember hosts matched by keyword for later requests.
    pub learn_hosts: bool,
}

impl Engine {
    pub fn new(
        db: AnalyticsDomainDb,
        rules: DghRuleSet,
        levels: BTreeMap<String, PrivacyLevel>,
        min_len: usize,
        seed: Option<u64>,
    ) -> Self {
        Engine {
            detector: Detector::new(db, KeywordSet::default()),
            rules,
            buffer: EventBuffer::new(seed.unwrap_or_else(rand::random)),
            levels,
            min_len,
            seed,
            metrics: MetricsCollector::new(),
            learn_hosts: true,
        }
    }

    /// Loads the host list, rules and optional persisted state named by `cfg`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate("config")?;
        let db = AnalyticsDomainDb::load(cfg.host_list_path.as_deref().expect("validated"))?;
        if let Some(path) = &cfg.learned_hosts_path {
            if path.exists() {
                db.load_learned(path)?;
            }
        }
        let rules = DghRuleSet::load(cfg.dgh_rules_path.as_deref().expect("validated"))?;
        let mut engine = Engine::new(db, rules, cfg.per_app_levels.clone(), cfg.min_len, cfg.rng_seed);
        if let Some(kw) = &cfg.keywords {
            engine.detector.keywords = KeywordSet::new(kw);
        }
        if let Some(path) = &cfg.buffer_snapshot_path {
            if path.exists() {
                engine.buffer.load_snapshot(path)?;
            }
        }
        Ok(engine)
    }

    /// Writes learned hosts and the event buffer snapshot when configured.
    pub fn persist(&self, cfg: &Config) -> Result<()> {
        if let Some(path) = &cfg.learned_hosts_path {
            self.detector.db.save_learned(path)?;
        }
        if let Some(path) = &cfg.buffer_snapshot_path {
            self.buffer.save_snapshot(path)?;
        }
        Ok(())
    }

    pub fn level_for(&self, app: &str) -> PrivacyLevel {
        self.levels.get(app).copied().unwrap_or_default()
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            seed: self.seed,
            apps: self.metrics.snapshot(),
        }
    }

    /// Records the upstream verdict for one forwarded analytics request.
    pub fn record_forward(&self, app: &str, host: &str, accepted: bool) {
        let level = self.level_for(app);
        self.metrics.update(app, level, |m| m.record_forward(host, accepted));
    }

    /// Runs detection, generalization and perturbation for one request.
    ///
    /// Requests of one (app, host) pair must be processed in arrival order.
    pub fn process(&self, req: &ParsedRequest, timestamp: i64) -> Processed {
        let app = req.app.as_str();
        let level = self.level_for(app);
        let verdict = if self.learn_hosts {
            self.detector.detect(req)
        } else {
            classify(req, &self.detector.db, &self.detector.keywords)
        };
        let done = |disposition, actions| Processed {
            verdict,
            level,
            actions,
            disposition,
        };

        if !verdict.is_analytics() {
            self.metrics.update(app, level, |m| m.non_analytics += 1);
            return done(Disposition::Original, vec![]);
        }
        let body = match &req.body {
            DecodedBody::Structured(b) => b,
            DecodedBody::Opaque | DecodedBody::Failed(_) => {
                if let DecodedBody::Failed(why) = &req.body {
                    tracing::debug!(app, host = req.host(), %why, "body not decodable, forwarding as received");
                }
                self.metrics.update(app, level, |m| m.unanonymized += 1);
                return done(Disposition::Original, vec![]);
            }
        };

        if level.is_none() {
            self.metrics.update(app, level, |m| match body.attributes().and_then(|a| a.event_type()) {
                Some(kind) => {
                    m.events_in += 1;
                    m.passed += 1;
                    m.total_emitted += 1;
                    *m.original_histogram.entry(kind.to_owned()).or_default() += 1;
                    *m.anonymized_histogram.entry(kind.to_owned()).or_default() += 1;
                }
                None => m.generalized_only += 1,
            });
            return done(Disposition::Original, vec![]);
        }

        let generalized = generalize_request(&body.tree, level, &self.rules);
        let event = match &generalized {
            Value::Tree(attrs) => AnalyticsEvent::from_attributes(attrs.clone(), timestamp),
            _ => None,
        };
        let key = AppHostKey::new(app, req.host());
        let (Some(current), Ok(key)) = (event, key) else {
            return match encode(&generalized, body, &req.headers) {
                Some((headers, bytes)) => {
                    self.metrics.update(app, level, |m| m.generalized_only += 1);
                    done(
                        Disposition::Rewritten {
                            requests: vec![Outbound {
                                headers,
                                body: bytes,
                                role: EmittedRole::Current,
                                timestamp,
                            }],
                            respond_with: Some(0),
                        },
                        vec![],
                    )
                }
                None => {
                    self.metrics.update(app, level, |m| m.unanonymized += 1);
                    done(Disposition::Original, vec![])
                }
            };
        };

        let original_type = current.event_type.clone();
        let outcome = match self
            .buffer
            .perturb(&key, current.clone(), level, self.min_len, &self.rules)
        {
            Ok(o) => o,
            Err(e) => {
                tracing::error!(%key, error = %e, "perturbation failed, forwarding as received");
                self.metrics.update(app, level, |m| m.unanonymized += 1);
                return done(Disposition::Original, vec![]);
            }
        };

        let mut requests = Vec::with_capacity(outcome.outputs.len());
        let mut respond_with = None;
        let mut forwarded_raw = false;
        self.metrics.update(app, level, |m| {
            m.record_outcome(&original_type, &outcome);
            for out in &outcome.outputs {
                let tree = Value::Tree(out.event.attributes.clone());
                let encoded = encode(&tree, body, &req.headers);
                let (headers, bytes, role) = match (encoded, out.role) {
                    (Some((h, b)), role) => (h, b, role),
                    (None, EmittedRole::Injected) => {
                        tracing::debug!(%key, "injected event does not fit the request format, skipped");
                        m.retract_emitted(&out.event.event_type, out.role);
                        continue;
                    }
                    (None, EmittedRole::Replacement) => {
                        m.retract_emitted(&out.event.event_type, out.role);
                        m.record_fallback(&current.event_type);
                        match encode(&generalized, body, &req.headers) {
                            Some((h, b)) => (h, b, EmittedRole::Current),
                            None => {
                                forwarded_raw = true;
                                (req.headers.clone(), req.raw_body.clone(), EmittedRole::Current)
                            }
                        }
                    }
                    (None, EmittedRole::Current) => {
                        forwarded_raw = true;
                        (req.headers.clone(), req.raw_body.clone(), EmittedRole::Current)
                    }
                };
                if role != EmittedRole::Injected {
                    respond_with = Some(requests.len());
                }
                requests.push(Outbound {
                    headers,
                    body: bytes,
                    role,
                    timestamp: out.event.timestamp,
                });
            }
            if forwarded_raw {
                m.unanonymized += 1;
            }
        });

        done(
            Disposition::Rewritten {
                requests,
                respond_with,
            },
            outcome.actions,
        )
    }
}

fn encode(tree: &Value, body: &StructuredBody, headers: &Headers) -> Option<(Headers, Vec<u8>)> {
    match codec::encode(tree, &body.format, body.encoding, headers) {
        Ok(e) => Some((e.headers, e.body)),
        Err(e) => {
            tracing::debug!(error = %e, "re-encoding failed");
            None
        }
    }
}
