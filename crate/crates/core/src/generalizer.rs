//! Attribute generalization: hierarchies, identifier masking and numeric
//! truncation, driven by an ordered rule list.
//!
//! A hierarchy with `n` levels is applied `min(level, n)` times, each step
//! mapping the previous domain onto a coarser one. The other rule kinds do not
//! depend on the privacy level.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_event_type_key, normalize_key, AttributeClass, PrivacyLevel, Value};

/// Rules shipped with the crate; reproduce the canonical before/after example.
pub const DEFAULT_RULES_JSON: &str = include_str!("../data/dgh_rules.json");

/// How many leading characters a mask keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepPrefix {
    Chars(usize),
    /// Keep `ceil(len / denominator)` bytes' worth of leading characters.
    Fraction { denominator: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NumberTruncation {
    /// Significant digits kept for magnitudes at or above `small_limit`.
    pub significant_digits: usize,
    pub small_limit: u64,
    /// Trailing digits zeroed below `small_limit` (always keeping one digit).
    pub small_zero_digits: usize,
}

impl Default for NumberTruncation {
    fn default() -> Self {
        NumberTruncation {
            significant_digits: 5,
            small_limit: 10_000,
            small_zero_digits: 2,
        }
    }
}

/// One step of a categorical ladder. Lookup is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryLevel {
    values: BTreeMap<String, String>,
    default: Option<String>,
    image: HashSet<String>,
}

impl CategoryLevel {
    pub fn new(values: BTreeMap<String, String>, default: Option<String>) -> Self {
        let image = values.values().cloned().chain(default.clone()).collect();
        let values = values
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        CategoryLevel {
            values,
            default,
            image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HierarchyLevel {
    Categories(CategoryLevel),
    /// Replace the last `n` characters with `*`.
    SuppressSuffix(usize),
    /// Zero an IPv4 address below the first `n` bits.
    Ipv4Prefix(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneralizationRule {
    Hierarchy(Vec<HierarchyLevel>),
    MaskSuffix(KeepPrefix),
    TruncateNumber(NumberTruncation),
    ReplaceFixed(String),
    Passthrough,
}

/// Exact key or prefix followed by `*`; compared on normalized keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyPattern {
    Exact(String),
    Prefix(String),
}

impl KeyPattern {
    pub fn parse(pattern: &str) -> Self {
        match pattern.strip_suffix('*') {
            Some(prefix) => KeyPattern::Prefix(normalize_key(prefix)),
            None => KeyPattern::Exact(normalize_key(pattern)),
        }
    }

    fn matches_normalized(&self, key: &str) -> bool {
        match self {
            KeyPattern::Exact(k) => k == key,
            KeyPattern::Prefix(p) => key.starts_with(p.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DghRule {
    pub pattern: KeyPattern,
    pub class: Option<AttributeClass>,
    pub rule: GeneralizationRule,
}

/// Ordered rule list; the first matching pattern wins.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DghRuleSet {
    rules: Vec<DghRule>,
}

// On-disk shape of one rule.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    key_pattern: String,
    kind: String,
    #[serde(default)]
    class: Option<AttributeClass>,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    levels: Vec<LevelSpec>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum LevelSpec {
    Map {
        values: BTreeMap<String, String>,
        #[serde(default)]
        default: Option<String>,
    },
    SuppressSuffix(usize),
    Ipv4Prefix(u8),
}

fn param_usize(params: &serde_json::Map<String, serde_json::Value>, name: &str) -> Result<Option<usize>, String> {
    match params.get(name) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| format!("parameter {name:?} must be a non-negative integer")),
    }
}

impl RuleSpec {
    fn into_rule(self) -> Result<DghRule, String> {
        if self.key_pattern.trim().is_empty() {
            return Err("empty key_pattern".into());
        }
        let p = &self.params;
        let rule = match self.kind.as_str() {
            "hierarchy" => {
                if self.levels.is_empty() {
                    return Err("hierarchy rule needs at least one level".into());
                }
                let levels = self
                    .levels
                    .into_iter()
                    .map(|l| match l {
                        LevelSpec::Map { values, default } => {
                            if values.is_empty() && default.is_none() {
                                Err("map level needs values or a default".to_owned())
                            } else {
                                Ok(HierarchyLevel::Categories(CategoryLevel::new(values, default)))
                            }
                        }
                        LevelSpec::SuppressSuffix(n) => Ok(HierarchyLevel::SuppressSuffix(n)),
                        LevelSpec::Ipv4Prefix(bits) if bits <= 32 => Ok(HierarchyLevel::Ipv4Prefix(bits)),
                        LevelSpec::Ipv4Prefix(bits) => Err(format!("ipv4_prefix {bits} exceeds 32")),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                GeneralizationRule::Hierarchy(levels)
            }
            "mask_suffix" => {
                let keep = match (param_usize(p, "keep_prefix_chars")?, param_usize(p, "keep_fraction_denominator")?) {
                    (Some(n), None) => KeepPrefix::Chars(n),
                    (None, Some(d)) if d > 0 => KeepPrefix::Fraction { denominator: d },
                    (None, Some(_)) => return Err("keep_fraction_denominator must be positive".into()),
                    _ => {
                        return Err(
                            "mask_suffix needs exactly one of keep_prefix_chars, keep_fraction_denominator".into(),
                        )
                    }
                };
                GeneralizationRule::MaskSuffix(keep)
            }
            "truncate_number" => {
                let d = NumberTruncation::default();
                let t = NumberTruncation {
                    significant_digits: param_usize(p, "significant_digits")?.unwrap_or(d.significant_digits),
                    small_limit: param_usize(p, "small_limit")?.map_or(d.small_limit, |n| n as u64),
                    small_zero_digits: param_usize(p, "small_zero_digits")?.unwrap_or(d.small_zero_digits),
                };
                if t.significant_digits == 0 {
                    return Err("significant_digits must be at least 1".into());
                }
                GeneralizationRule::TruncateNumber(t)
            }
            "replace_fixed" => {
                let replacement = p
                    .get("replacement")
                    .and_then(|v| v.as_str())
                    .ok_or("replace_fixed needs a string parameter \"replacement\"")?;
                GeneralizationRule::ReplaceFixed(replacement.to_owned())
            }
            "passthrough" => GeneralizationRule::Passthrough,
            other => return Err(format!("unknown rule kind {other:?}")),
        };
        Ok(DghRule {
            pattern: KeyPattern::parse(&self.key_pattern),
            class: self.class,
            rule,
        })
    }
}

impl DghRuleSet {
    pub fn new(rules: Vec<DghRule>) -> Self {
        DghRuleSet { rules }
    }

    /// The shipped default rules.
    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES_JSON, "built-in rules").expect("built-in rules are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let specs: Vec<RuleSpec> = serde_json::from_str(text)
            .map_err(|e| Error::config(source_name, format!("malformed rule file: {e}")))?;
        let rules = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let pattern = spec.key_pattern.clone();
                spec.into_rule()
                    .map_err(|m| Error::config(source_name, format!("rule {i} ({pattern:?}): {m}")))
            })
            .collect::<Result<_>>()?;
        Ok(DghRuleSet { rules })
    }

    pub fn rules(&self) -> &[DghRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// First rule whose pattern matches `key`.
    pub fn rule_for(&self, key: &str) -> Option<&DghRule> {
        let key = normalize_key(key);
        self.rules.iter().find(|r| r.pattern.matches_normalized(&key))
    }
}

/// Generalizes one scalar value. Unmatched keys and composite values pass
/// through unchanged, as does everything at [`PrivacyLevel::None`].
pub fn generalize_value(key: &str, value: &Value, level: PrivacyLevel, rules: &DghRuleSet) -> Value {
    if level.is_none() || !value.is_scalar() {
        return value.clone();
    }
    match rules.rule_for(key) {
        Some(rule) => apply_rule(&rule.rule, value, level),
        None => value.clone(),
    }
}

/// Applies [`generalize_value`] to every leaf of `tree`. Keys, nesting and
/// order are preserved; event-type attributes are left for the DP stage.
pub fn generalize_request(tree: &Value, level: PrivacyLevel, rules: &DghRuleSet) -> Value {
    if level.is_none() {
        return tree.clone();
    }
    generalize_node(None, tree, level, rules)
}

fn generalize_node(key: Option<&str>, value: &Value, level: PrivacyLevel, rules: &DghRuleSet) -> Value {
    match value {
        Value::Tree(t) => Value::Tree(
            t.iter()
                .map(|(k, v)| {
                    let out = if v.is_scalar() && is_event_type_key(k) {
                        v.clone()
                    } else {
                        generalize_node(Some(k), v, level, rules)
                    };
                    (k.clone(), out)
                })
                .collect(),
        ),
        Value::List(items) => Value::List(
            items
                .iter()
                .map(|v| generalize_node(key, v, level, rules))
                .collect(),
        ),
        scalar => match key {
            Some(k) => generalize_value(k, scalar, level, rules),
            None => scalar.clone(),
        },
    }
}

fn scalar_text(value: &Value) -> Option<&str> {
    match value {
        Value::String(s) | Value::Number(s) => Some(s),
        _ => None,
    }
}

fn apply_rule(rule: &GeneralizationRule, value: &Value, level: PrivacyLevel) -> Value {
    match rule {
        GeneralizationRule::Passthrough => value.clone(),
        GeneralizationRule::ReplaceFixed(r) => Value::String(r.clone()),
        GeneralizationRule::MaskSuffix(keep) => match scalar_text(value) {
            Some(s) => Value::String(mask_suffix(s, *keep)),
            None => value.clone(),
        },
        GeneralizationRule::TruncateNumber(t) => match value {
            Value::Number(n) => truncate_number(n, t).map_or_else(|| value.clone(), Value::Number),
            Value::String(s) => truncate_number(s, t).map_or_else(|| value.clone(), Value::String),
            _ => value.clone(),
        },
        GeneralizationRule::Hierarchy(levels) => match scalar_text(value) {
            Some(s) => {
                let depth = usize::from(level.as_u8()).min(levels.len());
                Value::String(apply_hierarchy(levels, depth, s))
            }
            None => value.clone(),
        },
    }
}

/// Runs the first `depth` levels of a hierarchy. A categorical level leaves a
/// value alone when it already belongs to the output domain of that level or
/// a later one, which keeps repeated application stable.
pub fn apply_hierarchy(levels: &[HierarchyLevel], depth: usize, value: &str) -> String {
    let mut current = value.to_owned();
    for (i, level) in levels.iter().enumerate().take(depth) {
        current = match level {
            HierarchyLevel::SuppressSuffix(n) => suppress_suffix(&current, *n),
            HierarchyLevel::Ipv4Prefix(bits) => ipv4_prefix(&current, *bits).unwrap_or(current),
            HierarchyLevel::Categories(cat) => {
                let already_general = levels[i..].iter().any(|l| match l {
                    HierarchyLevel::Categories(c) => c.image.contains(&current),
                    _ => false,
                });
                if already_general {
                    current
                } else if let Some(v) = cat.values.get(&current.to_lowercase()) {
                    v.clone()
                } else if let Some(d) = &cat.default {
                    d.clone()
                } else {
                    current
                }
            }
        };
    }
    current
}

/// Keeps a prefix and replaces the remaining bytes with `*`, so the output
/// has the same byte length as the input.
pub fn mask_suffix(s: &str, keep: KeepPrefix) -> String {
    let prefix_end = match keep {
        KeepPrefix::Chars(n) => s.char_indices().nth(n).map_or(s.len(), |(i, _)| i),
        KeepPrefix::Fraction { denominator } => {
            let target = s.len().div_ceil(denominator);
            let mut end = 0;
            for (i, c) in s.char_indices() {
                if i + c.len_utf8() > target {
                    break;
                }
                end = i + c.len_utf8();
            }
            end
        }
    };
    let mut out = String::with_capacity(s.len());
    out.push_str(&s[..prefix_end]);
    out.extend(std::iter::repeat_n('*', s.len() - prefix_end));
    out
}

pub fn suppress_suffix(s: &str, n: usize) -> String {
    let count = s.chars().count();
    let keep = count.saturating_sub(n);
    s.chars()
        .take(keep)
        .chain(std::iter::repeat_n('*', count - keep))
        .collect()
}

pub fn ipv4_prefix(s: &str, bits: u8) -> Option<String> {
    let addr: Ipv4Addr = s.trim().parse().ok()?;
    let mask = if bits == 0 { 0 } else { u32::MAX << (32 - u32::from(bits)) };
    Some(Ipv4Addr::from(u32::from(addr) & mask).to_string())
}

/// Zeroes trailing digits of a decimal number, keeping its digit count.
/// Returns `None` when `text` is not a plain decimal number.
pub fn truncate_number(text: &str, t: &NumberTruncation) -> Option<String> {
    let (sign, unsigned) = match text.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", text),
    };
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int_part) || frac_part.is_some_and(|f| !all_digits(f)) {
        return None;
    }
    let significant = int_part.trim_start_matches('0');
    let n = significant.len();
    let is_small = n < 20 && significant.parse::<u64>().is_ok_and(|v| v < t.small_limit);
    let zeroed = if is_small {
        t.small_zero_digits.min(n.saturating_sub(1))
    } else {
        n.saturating_sub(t.significant_digits)
    };
    let lead = int_part.len() - n;
    let mut out = String::with_capacity(text.len());
    out.push_str(sign);
    out.push_str(&int_part[..lead + n - zeroed]);
    out.extend(std::iter::repeat_n('0', zeroed));
    if let Some(f) = frac_part {
        out.push('.');
        out.extend(std::iter::repeat_n('0', f.len()));
    }
    Some(out)
}
