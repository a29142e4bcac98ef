//! Run metrics, KL divergence between event-type distributions, and the
//! summary/acceptance reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dp::{EmittedRole, PerturbationOutcome};
use crate::error::{Error, Result};
use crate::model::{AnonymizationAction, PrivacyLevel};

pub type Histogram = BTreeMap<String, u64>;

pub const DEFAULT_EPSILON: f64 = 1e-9;

/// `D(p || q)` in nats over the union support, after adding `epsilon` to
/// every count of both histograms.
pub fn kl_divergence(p: &Histogram, q: &Histogram, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::config("epsilon", "smoothing epsilon must be positive"));
    }
    if p.is_empty() && q.is_empty() {
        return Err(Error::EmptyHistograms);
    }
    let support: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let smoothed = |h: &Histogram| -> Vec<f64> {
        support
            .iter()
            .map(|k| h.get(*k).copied().unwrap_or(0) as f64 + epsilon)
            .collect()
    };
    let (ps, qs) = (smoothed(p), smoothed(q));
    let (p_total, q_total): (f64, f64) = (ps.iter().sum(), qs.iter().sum());
    let d: f64 = ps
        .iter()
        .zip(&qs)
        .map(|(pc, qc)| {
            let (pi, qi) = (pc / p_total, qc / q_total);
            pi * (pi / qi).ln()
        })
        .sum();
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostCounts {
    pub forwarded: u64,
    pub accepted: u64,
}

impl HostCounts {
    pub fn rate(&self) -> Option<f64> {
        acceptance_rate(self.forwarded, self.accepted)
    }
}

/// 100 * accepted / forwarded, undefined when nothing was forwarded.
pub fn acceptance_rate(forwarded: u64, accepted: u64) -> Option<f64> {
    (forwarded > 0).then(|| 100.0 * accepted as f64 / forwarded as f64)
}

/// Counters for one app at one privacy level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub app: String,
    pub level: PrivacyLevel,
    /// Analytics events that reached the DP stage.
    pub events_in: u64,
    pub passed: u64,
    pub injected: u64,
    pub removed: u64,
    pub replaced: u64,
    /// Events emitted by the DP stage: passed + replaced + injected.
    pub total_emitted: u64,
    /// Analytics requests without an event type; generalized only.
    pub generalized_only: u64,
    /// Analytics requests forwarded as received because the body could not be decoded.
    pub unanonymized: u64,
    /// Requests not classified as analytics.
    pub non_analytics: u64,
    pub forwarded: u64,
    pub accepted: u64,
    pub original_histogram: Histogram,
    pub anonymized_histogram: Histogram,
    pub per_host: BTreeMap<String, HostCounts>,
}

impl RunMetrics {
    pub fn new(app: impl Into<String>, level: PrivacyLevel) -> Self {
        RunMetrics {
            app: app.into(),
            level,
            ..Default::default()
        }
    }

    /// Records one DP outcome for an event of type `original_type`.
    pub fn record_outcome(&mut self, original_type: &str, outcome: &PerturbationOutcome) {
        self.events_in += 1;
        *self.original_histogram.entry(original_type.to_owned()).or_default() += 1;
        match outcome.primary_action() {
            AnonymizationAction::Replace => self.replaced += 1,
            AnonymizationAction::Remove => self.removed += 1,
            _ => self.passed += 1,
        }
        if outcome.injected() {
            self.injected += 1;
        }
        for out in &outcome.outputs {
            self.record_emitted(&out.event.event_type);
        }
    }

    fn record_emitted(&mut self, event_type: &str) {
        self.total_emitted += 1;
        *self.anonymized_histogram.entry(event_type.to_owned()).or_default() += 1;
    }

    /// Undoes the bookkeeping for an emitted event that was never sent.
    pub fn retract_emitted(&mut self, event_type: &str, role: EmittedRole) {
        self.total_emitted = self.total_emitted.saturating_sub(1);
        if let Some(n) = self.anonymized_histogram.get_mut(event_type) {
            *n -= 1;
            if *n == 0 {
                self.anonymized_histogram.remove(event_type);
            }
        }
        match role {
            EmittedRole::Injected => self.injected = self.injected.saturating_sub(1),
            EmittedRole::Replacement => {
                // The current event is sent in its place.
                self.replaced = self.replaced.saturating_sub(1);
                self.passed += 1;
            }
            EmittedRole::Current => {}
        }
    }

    /// Credits the current event emitted in place of a failed replacement.
    pub fn record_fallback(&mut self, event_type: &str) {
        self.record_emitted(event_type);
    }

    pub fn record_forward(&mut self, host: &str, accepted: bool) {
        self.forwarded += 1;
        let h = self.per_host.entry(host.to_owned()).or_default();
        h.forwarded += 1;
        if accepted {
            self.accepted += 1;
            h.accepted += 1;
        }
    }

    pub fn kl(&self) -> Result<f64> {
        self.kl_with(DEFAULT_EPSILON)
    }

    pub fn kl_with(&self, epsilon: f64) -> Result<f64> {
        kl_divergence(&self.original_histogram, &self.anonymized_histogram, epsilon)
    }

    pub fn acceptance(&self) -> Option<f64> {
        acceptance_rate(self.forwarded, self.accepted)
    }

    /// Events dropped by the DP stage.
    pub fn dropped(&self) -> u64 {
        self.removed
    }

    /// Checks the bookkeeping identities; returns a description of the first violation.
    pub fn check_conservation(&self) -> std::result::Result<(), String> {
        if self.total_emitted != self.passed + self.replaced + self.injected {
            return Err(format!(
                "{}: total_emitted {} != passed {} + replaced {} + injected {}",
                self.app, self.total_emitted, self.passed, self.replaced, self.injected
            ));
        }
        if self.passed + self.replaced + self.removed != self.events_in {
            return Err(format!(
                "{}: passed {} + replaced {} + removed {} != events_in {}",
                self.app, self.passed, self.replaced, self.removed, self.events_in
            ));
        }
        let orig: u64 = self.original_histogram.values().sum();
        let anon: u64 = self.anonymized_histogram.values().sum();
        if orig != self.events_in || anon != self.total_emitted {
            return Err(format!(
                "{}: histogram totals {orig}/{anon} != counts {}/{}",
                self.app, self.events_in, self.total_emitted
            ));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RunMetrics) {
        self.events_in += other.events_in;
        self.passed += other.passed;
        self.injected += other.injected;
        self.removed += other.removed;
        self.replaced += other.replaced;
        self.total_emitted += other.total_emitted;
        self.generalized_only += other.generalized_only;
        self.unanonymized += other.unanonymized;
        self.non_analytics += other.non_analytics;
        self.forwarded += other.forwarded;
        self.accepted += other.accepted;
        for (k, v) in &other.original_histogram {
            *self.original_histogram.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.anonymized_histogram {
            *self.anonymized_histogram.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.per_host {
            let h = self.per_host.entry(k.clone()).or_default();
            h.forwarded += v.forwarded;
            h.accepted += v.accepted;
        }
    }
}

/// Thread-safe per-app metrics store shared by the proxy workers.
#[derive(Debug, Default)]
pub struct MetricsCollector {
    apps: Mutex<BTreeMap<String, RunMetrics>>,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update<R>(&self, app: &str, level: PrivacyLevel, f: impl FnOnce(&mut RunMetrics) -> R) -> R {
        let mut apps = self.apps.lock().expect("metrics lock");
        let m = apps
            .entry(app.to_owned())
            .or_insert_with(|| RunMetrics::new(app, level));
        m.level = level;
        f(m)
    }

    pub fn snapshot(&self) -> Vec<RunMetrics> {
        self.apps.lock().expect("metrics lock").values().cloned().collect()
    }
}

/// One replay or proxy run: per-app metrics in app order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: Option<u64>,
    pub apps: Vec<RunMetrics>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::config(source_name, format!("line {}: {e}", e.line()))
        })
    }

    /// Mean per-app D_KL over apps that saw at least one event.
    pub fn mean_kl(&self) -> Option<f64> {
        let v: Vec<f64> = self.apps.iter().filter_map(|m| m.kl().ok()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary(&self) -> Vec<LevelSummary> {
        summarize(&self.apps)
    }
}

/// Per-level row of the summary report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub level: PrivacyLevel,
    pub threshold: f64,
    pub runs: usize,
    pub mean_inj: f64,
    pub mean_rem: f64,
    pub mean_rep: f64,
    pub mean_total: f64,
    pub mean_dkl: f64,
}

/// Averages metrics per level. Levels with no runs are omitted; runs without
/// events contribute to the count means but not to the D_KL mean.
pub fn summarize(runs: &[RunMetrics]) -> Vec<LevelSummary> {
    PrivacyLevel::ALL
        .iter()
        .filter_map(|&level| {
            let rs: Vec<&RunMetrics> = runs.iter().filter(|m| m.level == level).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let mean = |f: fn(&RunMetrics) -> u64| rs.iter().map(|m| f(m) as f64).sum::<f64>() / n;
            let kls: Vec<f64> = rs.iter().filter_map(|m| m.kl().ok()).collect();
            let mean_dkl = if kls.is_empty() {
                0.0
            } else {
                kls.iter().sum::<f64>() / kls.len() as f64
            };
            Some(LevelSummary {
                level,
                threshold: level.threshold(),
                runs: rs.len(),
                mean_inj: mean(|m| m.injected),
                mean_rem: mean(|m| m.removed),
                mean_rep: mean(|m| m.replaced),
                mean_total: mean(|m| m.total_emitted),
                mean_dkl,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[LevelSummary]) -> String {
    let mut out = String::from("level,TH,mean_inj,mean_rem,mean_rep,mean_total,mean_dkl\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.6}",
            r.level, r.threshold, r.mean_inj, r.mean_rem, r.mean_rep, r.mean_total, r.mean_dkl
        );
    }
    out
}

pub fn summary_table(rows: &[LevelSummary]) -> String {
    let header = ["Level", "TH", "Inj", "Rem", "Rep", "Total", "D_KL"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.level.to_string(),
                format!("{:.2}", r.threshold),
                format!("{:.2}", r.mean_inj),
                format!("{:.2}", r.mean_rem),
                format!("{:.2}", r.mean_rep),
                format!("{:.2}", r.mean_total),
                format!("{:.4}", r.mean_dkl),
            ]
        })
        .collect();
    render_table(&header, &body)
}

fn render_table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths: [usize; N] = header.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(widths.iter())
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &mut header.iter().copied());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for row in rows {
        line(&mut out, &mut row.iter().map(String::as_str));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRow {
    pub host: String,
    pub counts: HostCounts,
}

/// Per-host acceptance across all runs, hosts sorted, plus a final `overall` row.
pub fn acceptance_rows(runs: &[RunMetrics]) -> Vec<AcceptanceRow> {
    let mut hosts: BTreeMap<&str, HostCounts> = BTreeMap::new();
    for m in runs {
        for (host, c) in &m.per_host {
            let h = hosts.entry(host).or_default();
            h.forwarded += c.forwarded;
            h.accepted += c.accepted;
        }
    }
    let overall = hosts.values().fold(HostCounts::default(), |a, c| HostCounts {
        forwarded: a.forwarded + c.forwarded,
        accepted: a.accepted + c.accepted,
    });
    hosts
        .into_iter()
        .map(|(host, counts)| AcceptanceRow {
            host: host.to_owned(),
            counts,
        })
        .chain(std::iter::once(AcceptanceRow {
            host: "overall".into(),
            counts: overall,
        }))
        .collect()
}

pub fn acceptance_csv(rows: &[AcceptanceRow]) -> String {
    let mut out = String::from("host,forwarded,accepted,rate\n");
    for r in rows {
        let rate = r
            .counts
            .rate()
            .map_or_else(|| "n/a".to_owned(), |v| format!("{v:.1}"));
        let _ = writeln!(out, "{},{},{},{rate}", r.host, r.counts.forwarded, r.counts.accepted);
    }
    out
}

/// One-sided Mann-Whitney U test of "samples in `x` tend to be smaller than
/// in `y`". Normal approximation with tie correction; returns the p-value.
pub fn mann_whitney_less(x: &[f64], y: &[f64]) -> f64 {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    if x.is_empty() || y.is_empty() {
        return 1.0;
    }
    let mut all: Vec<(f64, usize)> = x
        .iter()
        .map(|&v| (v, 0))
        .chain(y.iter().map(|&v| (v, 1)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; all.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in &mut ranks[i..=j] {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| r)
        .sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    // Continuity correction towards the null.
    let z = (u1 - mean + 0.5) / var.sqrt();
    Normal::standard().cdf(z)
}
