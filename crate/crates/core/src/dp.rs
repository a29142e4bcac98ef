//! Local-DP event perturbation over the per-(app, host) event history.
//!
//! Each event past the warm-up draws three uniforms (inject, remove, replace,
//! in that order) and compares them to the level threshold:
//!
//! * inject: emit an extra event sampled from history, before the current one;
//! * replace: emit a re-generalized history event instead of the current one;
//! * otherwise remove: drop the current event;
//! * otherwise emit the current event unchanged.
//!
//! The original (generalized) event is always appended to the history.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generalizer::{generalize_request, DghRuleSet};
use crate::model::{AnalyticsEvent, AnonymizationAction, AppHostKey, PrivacyLevel, Value};

pub const DEFAULT_MIN_LEN: usize = 5;

/// Injected events are re-stamped within this many milliseconds of the trigger.
pub const INJECT_JITTER_MS: f64 = 30_000.0;

/// Source of independent uniform draws in `[0, 1)`.
pub trait RandomSource {
    fn next_unit(&mut self) -> f64;
}

/// ChaCha8-backed source; identical seeds give identical draw sequences.
#[derive(Debug, Clone)]
pub struct SeededRandom(ChaCha8Rng);

impl SeededRandom {
    pub fn new(seed: u64) -> Self {
        SeededRandom(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for one key, stable across runs and platforms.
    pub fn for_key(seed: u64, key: &AppHostKey) -> Self {
        Self::new(seed ^ key_hash(key))
    }
}

impl RandomSource for SeededRandom {
    fn next_unit(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

/// Replays a fixed list of draws. Panics when exhausted.
#[derive(Debug, Clone, Default)]
pub struct FixedDraws(VecDeque<f64>);

impl FixedDraws {
    pub fn new(draws: impl IntoIterator<Item = f64>) -> Self {
        FixedDraws(draws.into_iter().collect())
    }

    pub fn remaining(&self) -> usize {
        self.0.len()
    }
}

impl RandomSource for FixedDraws {
    fn next_unit(&mut self) -> f64 {
        self.0.pop_front().expect("FixedDraws exhausted")
    }
}

/// FNV-1a over `app \0 host`.
fn key_hash(key: &AppHostKey) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key
        .app_name
        .bytes()
        .chain(std::iter::once(0))
        .chain(key.host_name.bytes())
    {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmittedRole {
    /// The intercepted event itself.
    Current,
    /// A history event standing in for the intercepted one.
    Replacement,
    /// An extra event sampled from history.
    Injected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub event: AnalyticsEvent,
    pub role: EmittedRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationOutcome {
    /// 0, 1 or 2 events in emission order.
    pub outputs: Vec<Emitted>,
    pub actions: Vec<AnonymizationAction>,
}

impl PerturbationOutcome {
    /// What happened to the current event: pass, replace or remove.
    pub fn primary_action(&self) -> AnonymizationAction {
        self.actions
            .iter()
            .copied()
            .find(|a| *a != AnonymizationAction::Inject)
            .unwrap_or(AnonymizationAction::PassThrough)
    }

    pub fn injected(&self) -> bool {
        self.actions.contains(&AnonymizationAction::Inject)
    }

    /// Index of the output that carries the current or replacement event.
    pub fn carrier_index(&self) -> Option<usize> {
        self.outputs
            .iter()
            .position(|e| e.role != EmittedRole::Injected)
    }
}

fn pick(history: &[AnalyticsEvent], u: f64) -> (&AnalyticsEvent, f64) {
    let scaled = u * history.len() as f64;
    let idx = (scaled as usize).min(history.len() - 1);
    (&history[idx], (scaled - idx as f64).clamp(0.0, 1.0))
}

/// Runs one event through the perturbation function.
///
/// `current` must already be generalized. Consumes draws in the order
/// inject, remove, replace, then one sampling draw per fired inject/replace.
/// The sampling draw's fractional remainder sets the injected timestamp
/// jitter, so no extra draw is taken for it.
pub fn perturb(
    current: AnalyticsEvent,
    history: &mut Vec<AnalyticsEvent>,
    level: PrivacyLevel,
    rng: &mut impl RandomSource,
    min_len: usize,
    rules: &DghRuleSet,
) -> Result<PerturbationOutcome> {
    if min_len == 0 {
        return Err(Error::config("min_len", "min_len must be at least 1"));
    }
    if level.is_none() || history.len() < min_len {
        history.push(current.clone());
        return Ok(PerturbationOutcome {
            outputs: vec![Emitted {
                event: current,
                role: EmittedRole::Current,
            }],
            actions: vec![AnonymizationAction::PassThrough],
        });
    }

    let threshold = level.threshold();
    let pr_inj = rng.next_unit();
    let pr_rem = rng.next_unit();
    let pr_rep = rng.next_unit();

    let mut outputs = Vec::with_capacity(2);
    let mut actions = Vec::with_capacity(2);

    if pr_inj > threshold {
        let (sampled, frac) = pick(history, rng.next_unit());
        let jitter = ((2.0 * frac - 1.0) * INJECT_JITTER_MS).round() as i64;
        let mut injected = sampled.clone();
        injected.timestamp = current.timestamp.saturating_add(jitter);
        outputs.push(Emitted {
            event: injected,
            role: EmittedRole::Injected,
        });
        actions.push(AnonymizationAction::Inject);
    }

    if pr_rep > threshold {
        let (sampled, _) = pick(history, rng.next_unit());
        let mut replacement = sampled.clone();
        replacement.attributes = match generalize_request(&Value::Tree(replacement.attributes), level, rules) {
            Value::Tree(t) => t,
            _ => unreachable!("generalization preserves the root shape"),
        };
        replacement.timestamp = current.timestamp;
        outputs.push(Emitted {
            event: replacement,
            role: EmittedRole::Replacement,
        });
        actions.push(AnonymizationAction::Replace);
    } else if pr_rem > threshold {
        actions.push(AnonymizationAction::Remove);
    } else {
        outputs.push(Emitted {
            event: current.clone(),
            role: EmittedRole::Current,
        });
        actions.push(AnonymizationAction::PassThrough);
    }

    history.push(current);
    Ok(PerturbationOutcome { outputs, actions })
}

/// Marginal firing probability of each action at `level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionRates {
    pub inject: f64,
    pub replace: f64,
    /// Removal only fires when replacement does not: `p * (1 - p)`.
    pub remove: f64,
}

pub fn action_rates(level: PrivacyLevel) -> ActionRates {
    let p = 1.0 - level.threshold();
    ActionRates {
        inject: p,
        replace: p,
        remove: p * (1.0 - p),
    }
}

/// History and random stream for one (app, host) pair.
#[derive(Debug)]
pub struct KeyStream {
    pub history: Vec<AnalyticsEvent>,
    pub rng: SeededRandom,
}

/// Per-key event histories. Each key is guarded by its own lock, so distinct
/// keys can be processed concurrently.
#[derive(Debug)]
pub struct EventBuffer {
    seed: u64,
    streams: Mutex<HashMap<AppHostKey, Arc<Mutex<KeyStream>>>>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    app_name: String,
    host_name: String,
    event: AnalyticsEvent,
}

impl EventBuffer {
    pub fn new(seed: u64) -> Self {
        EventBuffer {
            seed,
            streams: Mutex::new(HashMap::new()),
        }
    }

    pub fn stream(&self, key: &AppHostKey) -> Arc<Mutex<KeyStream>> {
        let mut streams = self.streams.lock().expect("event buffer lock");
        streams
            .entry(key.clone())
            .or_insert_with(|| {
                Arc::new(Mutex::new(KeyStream {
                    history: Vec::new(),
                    rng: SeededRandom::for_key(self.seed, key),
                }))
            })
            .clone()
    }

    pub fn history_len(&self, key: &AppHostKey) -> usize {
        let streams = self.streams.lock().expect("event buffer lock");
        streams
            .get(key)
            .map_or(0, |s| s.lock().expect("stream lock").history.len())
    }

    pub fn history(&self, key: &AppHostKey) -> Vec<AnalyticsEvent> {
        let stream = self.stream(key);
        let guard = stream.lock().expect("stream lock");
        guard.history.clone()
    }

    pub fn keys(&self) -> Vec<AppHostKey> {
        let streams = self.streams.lock().expect("event buffer lock");
        let mut keys: Vec<_> = streams.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Perturbs `current` against the history of `key`, using that key's stream.
    pub fn perturb(
        &self,
        key: &AppHostKey,
        current: AnalyticsEvent,
        level: PrivacyLevel,
        min_len: usize,
        rules: &DghRuleSet,
    ) -> Result<PerturbationOutcome> {
        let stream = self.stream(key);
        let mut guard = stream.lock().expect("stream lock");
        let KeyStream { history, rng } = &mut *guard;
        perturb(current, history, level, rng, min_len, rules)
    }

    /// Writes every buffered event as one JSON line, keys in sorted order.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let by_key: BTreeMap<_, _> = self
            .keys()
            .into_iter()
            .map(|k| {
                let h = self.history(&k);
                (k, h)
            })
            .collect();
        for (key, events) in by_key {
            for event in events {
                let line = SnapshotLine {
                    app_name: key.app_name.clone(),
                    host_name: key.host_name.clone(),
                    event,
                };
                serde_json::to_writer(&mut out, &line).map_err(|e| Error::Encode(e.to_string()))?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Appends events from a snapshot file to the matching histories.
    pub fn load_snapshot(&self, path: &Path) -> Result<usize> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut n = 0;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnapshotLine = serde_json::from_str(&line).map_err(|e| {
                Error::config(path.display().to_string(), format!("line {}: {e}", i + 1))
            })?;
            let key = AppHostKey::new(rec.app_name, rec.host_name)?;
            self.stream(&key)
                .lock()
                .expect("stream lock")
                .history
                .push(rec.event);
            n += 1;
        }
        Ok(n)
    }
}
