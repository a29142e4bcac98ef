//! Shared domain types: privacy levels, attribute trees, events.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The user's per-app privacy choice.
///
/// Encoded 0..=3 so that [`PrivacyLevel::threshold`] yields 1.0, 0.75, 0.5 and 0.25.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum PrivacyLevel {
    #[default]
    None = 0,
    Low = 1,
    Medium = 2,
    High = 3,
}

impl PrivacyLevel {
    pub const ALL: [PrivacyLevel; 4] = [
        PrivacyLevel::None,
        PrivacyLevel::Low,
        PrivacyLevel::Medium,
        PrivacyLevel::High,
    ];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(n: u8) -> Option<Self> {
        Self::ALL.get(n as usize).copied()
    }

    /// Action threshold `1 - level/4`. A uniform draw strictly above it fires
    /// the corresponding perturbation.
    pub fn threshold(self) -> f64 {
        1.0 - f64::from(self.as_u8()) / 4.0
    }

    pub fn is_none(self) -> bool {
        self == PrivacyLevel::None
    }

    pub fn name(self) -> &'static str {
        match self {
            PrivacyLevel::None => "NONE",
            PrivacyLevel::Low => "LOW",
            PrivacyLevel::Medium => "MEDIUM",
            PrivacyLevel::High => "HIGH",
        }
    }
}

/// Free-function form of [`PrivacyLevel::threshold`].
pub fn threshold(level: PrivacyLevel) -> f64 {
    level.threshold()
}

impl fmt::Display for PrivacyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrivacyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NONE" | "0" => Ok(PrivacyLevel::None),
            "LOW" | "1" => Ok(PrivacyLevel::Low),
            "MEDIUM" | "2" => Ok(PrivacyLevel::Medium),
            "HIGH" | "3" => Ok(PrivacyLevel::High),
            other => Err(Error::config(
                "privacy level",
                format!("unknown privacy level {other:?} (expected NONE, LOW, MEDIUM or HIGH)"),
            )),
        }
    }
}

impl Serialize for PrivacyLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PrivacyLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Privacy impact of an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttributeClass {
    /// Explicit identifier: identifies a user or device on its own.
    EI,
    /// Quasi-identifier: identifying in combination with other attributes.
    QI,
    /// Sensitive data: describes user behaviour.
    SD,
}

impl AttributeClass {
    /// Built-in classification of the attribute keys most commonly shipped by
    /// analytics SDKs. Keys are compared after [`normalize_key`].
    pub fn of_key(key: &str) -> Option<AttributeClass> {
        use AttributeClass::*;
        let class = match normalize_key(key).as_str() {
            "app_id" | "fid" | "uid" | "user" | "udid" | "device_id" | "android_id" | "user_id"
            | "device_data" | "uuid" | "ad_id" | "hardware_id" | "identity" | "bssid"
            | "advertiser_id" | "device_ip" | "mid" | "mac_address" | "device_finger_print_id"
            | "google_advertising_id" | "local_ip" => EI,
            "model" | "device" | "locale" | "manufacturer" | "brand" | "os" | "carrier"
            | "current" | "timezone" | "app" | "language" | "country" | "carrier_name"
            | "data" | "network" | "operator" | "app_instance_id" | "installation_uuid"
            | "ssid" | "screen_dpi" | "screen_height" | "screen_width" => QI,
            "name" | "type" | "duration" | "events" | "event_type" | "event" | "event_name"
            | "location" => SD,
            _ => return None,
        };
        Some(class)
    }
}

/// Canonical form used for all key comparisons: lowercase, with `-`, `_` and
/// camelCase boundaries collapsed to a single `_`.
///
/// `event-type`, `event_type`, `Event_Type` and `eventType` all normalize to
/// `event_type`.
pub fn normalize_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len() + 4);
    let mut prev_lower = false;
    for c in key.chars() {
        if c == '-' || c == '_' {
            if !out.ends_with('_') {
                out.push('_');
            }
            prev_lower = false;
        } else if c.is_uppercase() {
            if prev_lower && !out.ends_with('_') {
                out.push('_');
            }
            out.extend(c.to_lowercase());
            prev_lower = false;
        } else {
            out.push(c);
            prev_lower = c.is_lowercase() || c.is_ascii_digit();
        }
    }
    out
}

/// Normalized keys whose value names the event carried by a request.
pub const EVENT_TYPE_KEYS: [&str; 3] = ["event_type", "event_name", "event"];

pub fn is_event_type_key(key: &str) -> bool {
    EVENT_TYPE_KEYS.contains(&normalize_key(key).as_str())
}

/// A decoded attribute value.
///
/// Numbers keep their exact source text so that re-encoding never changes
/// their representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Null,
    Bool(bool),
    Number(String),
    String(String),
    List(Vec<Value>),
    Tree(Attributes),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_tree(&self) -> Option<&Attributes> {
        match self {
            Value::Tree(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, Value::List(_) | Value::Tree(_))
    }

    /// Number of scalar leaves below (and including) this value.
    pub fn leaf_count(&self) -> usize {
        match self {
            Value::List(items) => items.iter().map(Value::leaf_count).sum(),
            Value::Tree(t) => t.iter().map(|(_, v)| v.leaf_count()).sum(),
            _ => 1,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::String(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::String(s)
    }
}

impl From<Attributes> for Value {
    fn from(t: Attributes) -> Self {
        Value::Tree(t)
    }
}

impl From<serde_json::Value> for Value {
    fn from(v: serde_json::Value) -> Self {
        match v {
            serde_json::Value::Null => Value::Null,
            serde_json::Value::Bool(b) => Value::Bool(b),
            serde_json::Value::Number(n) => Value::Number(n.to_string()),
            serde_json::Value::String(s) => Value::String(s),
            serde_json::Value::Array(a) => Value::List(a.into_iter().map(Value::from).collect()),
            serde_json::Value::Object(o) => {
                Value::Tree(o.into_iter().map(|(k, v)| (k, Value::from(v))).collect())
            }
        }
    }
}

impl TryFrom<&Value> for serde_json::Value {
    type Error = Error;

    fn try_from(v: &Value) -> Result<Self> {
        Ok(match v {
            Value::Null => serde_json::Value::Null,
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::Number(n) => serde_json::Value::Number(
                n.parse()
                    .map_err(|_| Error::Encode(format!("invalid JSON number {n:?}")))?,
            ),
            Value::String(s) => serde_json::Value::String(s.clone()),
            Value::List(items) => serde_json::Value::Array(
                items
                    .iter()
                    .map(serde_json::Value::try_from)
                    .collect::<Result<_>>()?,
            ),
            Value::Tree(t) => {
                let mut map = serde_json::Map::with_capacity(t.len());
                for (k, v) in t.iter() {
                    map.insert(k.clone(), serde_json::Value::try_from(v)?);
                }
                serde_json::Value::Object(map)
            }
        })
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serde_json::Value::try_from(self)
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        serde_json::Value::deserialize(d).map(Value::from)
    }
}

/// An ordered key/value tree. Keeps insertion order and duplicate keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Attributes(Vec<(String, Value)>);

impl Attributes {
    pub fn new() -> Self {
        Attributes(Vec::new())
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.push((key.into(), value.into()));
    }

    /// Builder-style [`push`](Self::push).
    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.push(key, value);
        self
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Value> {
        self.0.iter_mut().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter().map(|(k, v)| (k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Value)> {
        self.0.iter_mut().map(|(k, v)| (&*k, v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(k, _)| k.as_str())
    }

    /// Visits every key at every nesting depth, depth first.
    pub fn visit_keys<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        fn walk<'a>(v: &'a Value, f: &mut impl FnMut(&'a str)) {
            match v {
                Value::Tree(t) => t.visit_keys(f),
                Value::List(items) => items.iter().for_each(|i| walk(i, f)),
                _ => {}
            }
        }
        for (k, v) in &self.0 {
            f(k);
            walk(v, f);
        }
    }

    /// Finds the first event-type attribute (depth first) holding a non-empty string.
    pub fn event_type(&self) -> Option<&str> {
        for (k, v) in &self.0 {
            if let Value::String(s) = v {
                if !s.is_empty() && is_event_type_key(k) {
                    return Some(s);
                }
            }
        }
        self.0.iter().find_map(|(_, v)| match v {
            Value::Tree(t) => t.event_type(),
            _ => None,
        })
    }
}

impl FromIterator<(String, Value)> for Attributes {
    fn from_iter<I: IntoIterator<Item = (String, Value)>>(iter: I) -> Self {
        Attributes(iter.into_iter().collect())
    }
}

impl IntoIterator for Attributes {
    type Item = (String, Value);
    type IntoIter = std::vec::IntoIter<(String, Value)>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl Serialize for Attributes {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Value::Tree(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Attributes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Tree(t) => Ok(t),
            _ => Err(serde::de::Error::custom("expected a JSON object")),
        }
    }
}

/// One user-interaction event as carried by an analytics request body.
///
/// `attributes` is the whole body tree, including the event-type key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticsEvent {
    pub event_type: String,
    pub attributes: Attributes,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
}

impl AnalyticsEvent {
    /// Builds an event from a body tree, or `None` when the tree carries no event type.
    pub fn from_attributes(attributes: Attributes, timestamp: i64) -> Option<Self> {
        let event_type = attributes.event_type()?.to_owned();
        Some(AnalyticsEvent {
            event_type,
            attributes,
            timestamp,
        })
    }
}

/// Identifies one (app, analytics host) stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AppHostKey {
    pub app_name: String,
    pub host_name: String,
}

impl AppHostKey {
    pub fn new(app_name: impl Into<String>, host_name: impl Into<String>) -> Result<Self> {
        let (app_name, host_name) = (app_name.into(), host_name.into());
        if app_name.is_empty() || host_name.is_empty() {
            return Err(Error::config(
                "app/host key",
                format!("app and host must be non-empty (got {app_name:?}, {host_name:?})"),
            ));
        }
        Ok(AppHostKey {
            app_name,
            host_name,
        })
    }
}

impl fmt::Display for AppHostKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.app_name, self.host_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnonymizationAction {
    Inject,
    Remove,
    Replace,
    PassThrough,
}

impl fmt::Display for AnonymizationAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnonymizationAction::Inject => "inject",
            AnonymizationAction::Remove => "remove",
            AnonymizationAction::Replace => "replace",
            AnonymizationAction::PassThrough => "pass",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert_eq!(threshold(PrivacyLevel::None), 1.0);
        assert_eq!(threshold(PrivacyLevel::Low), 0.75);
        assert_eq!(threshold(PrivacyLevel::Medium), 0.5);
        assert_eq!(threshold(PrivacyLevel::High), 0.25);
    }

    #[test]
    fn threshold_strictly_decreasing() {
        for pair in PrivacyLevel::ALL.windows(2) {
            assert!(pair[0].threshold() > pair[1].threshold());
        }
    }

    #[test]
    fn level_parse_and_display() {
        for level in PrivacyLevel::ALL {
            assert_eq!(level.name().parse::<PrivacyLevel>().unwrap(), level);
            assert_eq!(PrivacyLevel::from_u8(level.as_u8()), Some(level));
        }
        assert_eq!("high".parse::<PrivacyLevel>().unwrap(), PrivacyLevel::High);
        assert!("EXTREME".parse::<PrivacyLevel>().is_err());
        assert_eq!(PrivacyLevel::default(), PrivacyLevel::None);
    }

    #[test]
    fn key_normalization() {
        for k in ["event-type", "event_type", "Event_Type", "eventType", "EVENT-TYPE", "event__type"] {
            assert_eq!(normalize_key(k), "event_type", "{k}");
        }
        assert_eq!(normalize_key("deviceFingerPrintId"), "device_finger_print_id");
        assert_eq!(normalize_key("weather"), "weather");
    }

    #[test]
    fn attribute_classes() {
        assert_eq!(AttributeClass::of_key("hardware_id"), Some(AttributeClass::EI));
        assert_eq!(AttributeClass::of_key("deviceId"), Some(AttributeClass::EI));
        assert_eq!(AttributeClass::of_key("operator"), Some(AttributeClass::QI));
        assert_eq!(AttributeClass::of_key("event_type"), Some(AttributeClass::SD));
        assert_eq!(AttributeClass::of_key("weather"), None);
    }

    #[test]
    fn event_type_lookup_prefers_top_level() {
        let nested = Attributes::new().with("event_name", "Nested");
        let attrs = Attributes::new()
            .with("data", nested.clone())
            .with("event", "MOBILE_APP_INSTALL");
        assert_eq!(attrs.event_type(), Some("MOBILE_APP_INSTALL"));
        let only_nested = Attributes::new().with("data", nested);
        assert_eq!(only_nested.event_type(), Some("Nested"));
        assert_eq!(Attributes::new().with("event", "").event_type(), None);
    }

    #[test]
    fn json_numbers_keep_their_digits() {
        let v: Value = serde_json::from_str(r#"{"t":1609930857411,"f":1.50,"big":123456789012345678901234567890}"#).unwrap();
        let t = v.as_tree().unwrap();
        assert_eq!(t.get("t"), Some(&Value::Number("1609930857411".into())));
        assert_eq!(t.get("f"), Some(&Value::Number("1.50".into())));
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"t":1609930857411,"f":1.50,"big":123456789012345678901234567890}"#
        );
    }

    #[test]
    fn app_host_key_rejects_empty() {
        assert!(AppHostKey::new("", "h").is_err());
        assert!(AppHostKey::new("a", "").is_err());
        assert_eq!(AppHostKey::new("a", "h").unwrap().to_string(), "a@h");
    }
}
