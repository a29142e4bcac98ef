//! Synthetic analytics traffic for replay experiments.

use std::io::Write as _;

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::replay::ReplayRecord;

/// Event names in descending frequency rank.
pub const DEFAULT_VOCABULARY: [&str; 20] = [
    "CUSTOM_APP_EVENTS",
    "MOBILE_APP_INSTALL",
    "fb_sdk_initialize",
    "SessionStarted",
    "fb_mobile_activate_app",
    "InvalidConfig",
    "SdkInitialized",
    "shoplist_product_add",
    "DEFERRED_APP_LINK",
    "fb_mobile_login_method_start",
    "new_password_pv",
    "new_password_back",
    "ApplicationOpened",
    "fb_mobile_deactivate_app",
    "fb_sdk_settings_changed",
    "ApplicationBackgrounded",
    "event_build_property",
    "AdGetSignalsSucceeded",
    "fb_login_button_create",
    "ServerError",
];

pub const DEFAULT_HOSTS: [&str; 20] = [
    "pagead2.googlesyndication.com",
    "www.google-analytics.com",
    "app.adjust.com",
    "crashlyticsreports-pa.googleapis.com",
    "a.appbaqend.com",
    "api2.branch.io",
    "live.chartboost.com",
    "firebaseremoteconfig.googleapis.com",
    "rt.applovin.com",
    "googleads4.g.doubleclick.net",
    "t.appsflyer.com",
    "launches.appsflyer.com",
    "ms.applovin.com",
    "api.safedk.com",
    "infoevent.startappservice.com",
    "data.flurry.com",
    "ads.mopub.com",
    "www.facebook.com",
    "graph.facebook.com",
    "firebaseinstallations.googleapis.com",
];

const START_TS: i64 = 1_609_930_857_411;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub events: usize,
    pub apps: usize,
    pub vocabulary: Vec<String>,
    /// Zipf exponent over the vocabulary rank; 0 is uniform.
    pub skew: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            events: 3000,
            apps: 150,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| (*s).to_owned()).collect(),
            skew: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Format {
    Json,
    Form,
    Multipart,
}

struct AppProfile {
    name: String,
    host: &'static str,
    path: &'static str,
    format: Format,
    gzip: bool,
    event_key: &'static str,
    attrs: Vec<(&'static str, String)>,
}

fn hex(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect()
}

fn uuid(rng: &mut ChaCha8Rng) -> String {
    format!("{}-{}-{}-{}-{}", hex(rng, 8), hex(rng, 4), hex(rng, 4), hex(rng, 4), hex(rng, 12))
}

fn profile(i: usize, rng: &mut ChaCha8Rng) -> AppProfile {
    const MODELS: [(&str, &str); 5] = [
        ("Google", "Pixel 4"),
        ("Google", "Pixel 5"),
        ("Samsung", "SM-G991B"),
        ("Samsung", "SM-A515F"),
        ("Google", "Android SDK built for x86"),
    ];
    const COUNTRIES: [&str; 8] = ["US", "IT", "DE", "FR", "BR", "IN", "GB", "JP"];
    const NETWORKS: [&str; 2] = ["MOBILE", "WIFI"];
    const PATHS: [&str; 4] = ["/v1/events", "/api/track", "/collect", "/sdk/log"];
    const EVENT_KEYS: [&str; 3] = ["event_type", "event_name", "event"];
    let (brand, model) = *MODELS.choose(rng).unwrap();
    let install = START_TS - rng.gen_range(0..10_000_000_000i64);
    let attrs = vec![
        ("device_id", uuid(rng)),
        ("hardware_id", hex(rng, 16)),
        ("brand", brand.to_owned()),
        ("model", model.to_owned()),
        ("os", "Android".to_owned()),
        ("country", (*COUNTRIES.choose(rng).unwrap()).to_owned()),
        ("language", "en".to_owned()),
        ("network", (*NETWORKS.choose(rng).unwrap()).to_owned()),
        ("screen_dpi", ["420", "440", "560"].choose(rng).unwrap().to_string()),
        ("screen_height", rng.gen_range(1800..3200).to_string()),
        ("screen_width", rng.gen_range(1000..1600).to_string()),
        ("local_ip", format!("10.0.{}.{}", rng.gen_range(0..256), rng.gen_range(1..255))),
        ("first_install_time", install.to_string()),
    ];
    AppProfile {
        name: format!("app-{i:03}"),
        host: DEFAULT_HOSTS.choose(rng).unwrap(),
        path: PATHS.choose(rng).unwrap(),
        format: [Format::Json, Format::Form, Format::Multipart][i % 3],
        gzip: i % 5 == 4,
        event_key: EVENT_KEYS.choose(rng).unwrap(),
        attrs,
    }
}

fn body(app: &AppProfile, event: &str, seq: usize) -> (String, Vec<u8>) {
    let mut fields: Vec<(&str, String)> = vec![(app.event_key, event.to_owned())];
    fields.extend(app.attrs.iter().map(|(k, v)| (*k, v.clone())));
    match app.format {
        Format::Json => {
            let mut obj = serde_json::Map::new();
            for (k, v) in fields {
                let numeric = k.starts_with("screen_") || k.ends_with("_time");
                let value = if numeric {
                    serde_json::Value::Number(v.parse().expect("numeric attribute"))
                } else {
                    serde_json::Value::String(v)
                };
                obj.insert(k.to_owned(), value);
            }
            obj.insert("seq".into(), serde_json::Value::from(seq));
            let bytes = serde_json::to_vec(&obj).expect("json body");
            ("application/json".into(), bytes)
        }
        Format::Form => {
            let mut ser = form_urlencoded::Serializer::new(String::new());
            for (k, v) in &fields {
                ser.append_pair(k, v);
            }
            ser.append_pair("seq", &seq.to_string());
            (
                "application/x-www-form-urlencoded".into(),
                ser.finish().into_bytes(),
            )
        }
        Format::Multipart => {
            let boundary = format!("----corpus{}", &app.attrs[1].1[..12]);
            let mut out = String::new();
            for (k, v) in fields.iter().map(|(k, v)| (*k, v.as_str())).chain([("seq", seq.to_string().as_str())]) {
                out.push_str(&format!(
                    "--{boundary}\r\nContent-Disposition: form-data; name=\"{k}\"\r\n\r\n{v}\r\n"
                ));
            }
            out.push_str(&format!("--{boundary}--\r\n"));
            (
                format!("multipart/form-data; boundary={boundary}"),
                out.into_bytes(),
            )
        }
    }
}

/// Generates `spec.events` records in timestamp order.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<ReplayRecord>> {
    if spec.events == 0 || spec.apps == 0 {
        return Err(Error::config("corpus spec", "events and apps must be at least 1"));
    }
    if spec.vocabulary.is_empty() {
        return Err(Error::config("corpus spec", "vocabulary must not be empty"));
    }
    if !spec.skew.is_finite() || spec.skew < 0.0 {
        return Err(Error::config("corpus spec", "skew must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let apps: Vec<AppProfile> = (0..spec.apps).map(|i| profile(i, &mut rng)).collect();
    let weights: Vec<f64> = (1..=spec.vocabulary.len())
        .map(|rank| (rank as f64).powf(-spec.skew))
        .collect();
    let events = WeightedIndex::new(&weights).expect("positive weights");

    let mut ts = START_TS;
    let mut out = Vec::with_capacity(spec.events);
    for seq in 0..spec.events {
        ts += rng.gen_range(50..5_000);
        let app = &apps[rng.gen_range(0..apps.len())];
        let event = &spec.vocabulary[events.sample(&mut rng)];
        let (content_type, plain) = body(app, event, seq);
        let mut headers = vec![("Content-Type".to_owned(), content_type)];
        let mut rec = ReplayRecord {
            app: app.name.clone(),
            method: "POST".into(),
            url: format!("https://{}{}", app.host, app.path),
            headers: Vec::new(),
            body: None,
            body_b64: None,
            timestamp: ts,
        };
        if app.gzip {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&plain).expect("in-memory write");
            headers.push(("Content-Encoding".into(), "gzip".into()));
            rec.set_body(enc.finish().expect("in-memory gzip"));
        } else {
            rec.set_body(plain);
        }
        rec.headers = headers;
        out.push(rec);
    }
    Ok(out)
}

/// [`generate`] rendered as JSON lines.
pub fn generate_jsonl(spec: &CorpusSpec) -> Result<String> {
    let mut s = String::new();
    for rec in generate(spec)? {
        s.push_str(&rec.to_line());
        s.push('\n');
    }
    Ok(s)
}
