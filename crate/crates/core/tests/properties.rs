use std::collections::BTreeMap;

use anonproxy_core::codec::{self, BodyFormat, ContentEncoding};
use anonproxy_core::dp::{perturb, EmittedRole, SeededRandom};
use anonproxy_core::evaluator::{kl_divergence, Histogram, DEFAULT_EPSILON};
use anonproxy_core::generalizer::{generalize_request, DghRuleSet};
use anonproxy_core::{AnalyticsEvent, AnonymizationAction, Attributes, PrivacyLevel, Value};
use proptest::prelude::*;

const KEYS: [&str; 16] = [
    "device_id", "hardware_id", "model", "brand", "country", "screen_dpi", "screen_width", "local_ip",
    "zip_code", "mac_address", "operator", "sdk", "language", "first_install_time", "note", "price",
];

fn level() -> impl Strategy<Value = PrivacyLevel> {
    (0u8..4).prop_map(|n| PrivacyLevel::from_u8(n).unwrap())
}

fn scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        "[ -~]{0,24}".prop_map(Value::String),
        (0u64..10_000_000_000_000).prop_map(|n| Value::Number(n.to_string())),
        (0u8..=255, 0u8..=255, 0u8..=255, 0u8..=255)
            .prop_map(|(a, b, c, d)| Value::String(format!("{a}.{b}.{c}.{d}"))),
        prop::sample::select(vec!["US", "IT", "Google", "Pixel 4", "MOBILE", "Android"])
            .prop_map(|s| Value::String(s.to_owned())),
        any::<bool>().prop_map(Value::Bool),
    ]
}

fn key() -> impl Strategy<Value = String> {
    prop_oneof![
        prop::sample::select(KEYS.to_vec()).prop_map(str::to_owned),
        "[a-z]{1,8}",
    ]
}

fn flat_attrs() -> impl Strategy<Value = Attributes> {
    prop::collection::vec((key(), scalar()), 0..10).prop_map(|kv| {
        let mut seen = std::collections::HashSet::new();
        kv.into_iter().filter(|(k, _)| seen.insert(k.clone())).collect()
    })
}

fn tree() -> impl Strategy<Value = Value> {
    let leaf = scalar();
    leaf.prop_recursive(3, 32, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::List),
            prop::collection::vec((key(), inner), 0..6).prop_map(|kv| {
                let mut seen = std::collections::HashSet::new();
                Value::Tree(kv.into_iter().filter(|(k, _)| seen.insert(k.clone())).collect())
            }),
        ]
    })
}

fn histogram() -> impl Strategy<Value = Histogram> {
    prop::collection::btree_map("[a-e]", 0u64..50, 1..5)
}

fn event(kind: &str, ts: i64, rules: &DghRuleSet, level: PrivacyLevel) -> AnalyticsEvent {
    let attrs = Attributes::new()
        .with("event_type", kind)
        .with("device_id", "ffffffff-b626-4582-a9f2-20d36d7a4fe6")
        .with("country", "US");
    match generalize_request(&Value::Tree(attrs), level, rules) {
        Value::Tree(t) => AnalyticsEvent::from_attributes(t, ts).unwrap(),
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn none_level_is_identity(t in tree()) {
        prop_assert_eq!(generalize_request(&t, PrivacyLevel::None, &DghRuleSet::default_rules()), t);
    }

    #[test]
    fn generalization_is_idempotent(t in tree(), l in level()) {
        let rules = DghRuleSet::default_rules();
        let once = generalize_request(&t, l, &rules);
        prop_assert_eq!(generalize_request(&once, l, &rules), once);
    }

    #[test]
    fn generalization_preserves_shape(t in tree(), l in level()) {
        let g = generalize_request(&t, l, &DghRuleSet::default_rules());
        prop_assert_eq!(g.leaf_count(), t.leaf_count());
        if let (Value::Tree(a), Value::Tree(b)) = (&t, &g) {
            prop_assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        }
    }

    #[test]
    fn masks_preserve_length(id in "[0-9a-f-]{1,48}", l in 1u8..4) {
        let rules = DghRuleSet::default_rules();
        let t = Value::Tree(Attributes::new().with("device_id", id.as_str()));
        let g = generalize_request(&t, PrivacyLevel::from_u8(l).unwrap(), &rules);
        let out = g.as_tree().unwrap().get("device_id").unwrap().as_str().unwrap().to_owned();
        prop_assert_eq!(out.chars().count(), id.chars().count());
        let keep = id.len().div_ceil(3);
        prop_assert_eq!(&out[..keep], &id[..keep]);
        prop_assert!(out[keep..].chars().all(|c| c == '*'));
    }

    #[test]
    fn event_type_is_never_generalized(kind in "[A-Za-z_]{1,20}", l in level()) {
        let t = Value::Tree(Attributes::new().with("event_type", kind.as_str()).with("model", "Pixel 4"));
        let g = generalize_request(&t, l, &DghRuleSet::default_rules());
        prop_assert_eq!(g.as_tree().unwrap().event_type(), Some(kind.as_str()));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in histogram(), q in histogram()) {
        prop_assert!(kl_divergence(&p, &q, DEFAULT_EPSILON).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p, DEFAULT_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_zero_for_proportional(p in prop::collection::btree_map("[a-e]", 1u64..50, 1..5), k in 2u64..5) {
        let q: Histogram = p.iter().map(|(a, n)| (a.clone(), n * k)).collect();
        prop_assert!(kl_divergence(&p, &q, 1e-12).unwrap() < 1e-9);
    }

    #[test]
    fn form_and_multipart_round_trip(attrs in flat_attrs(), enc in prop::sample::select(ContentEncoding::ALL.to_vec())) {
        let attrs: Attributes = attrs
            .into_iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) | Value::Number(s) => s,
                    Value::Bool(b) => b.to_string(),
                    _ => String::new(),
                };
                (k, Value::String(text))
            })
            .collect();
        let tree = Value::Tree(attrs);
        for (ct, format) in [
            ("application/x-www-form-urlencoded", BodyFormat::FormUrlEncoded),
            ("multipart/form-data; boundary=b", BodyFormat::Multipart(Default::default())),
        ] {
            let mut headers = vec![("Content-Type".to_owned(), ct.to_owned())];
            let first = codec::encode(&tree, &format, enc, &headers).unwrap();
            headers = first.headers;
            let d = codec::decode(&headers, &first.body);
            let s = d.structured().expect("decodes");
            prop_assert_eq!(&s.tree, &tree);
        }
    }

    #[test]
    fn json_round_trip(t in tree(), enc in prop::sample::select(ContentEncoding::ALL.to_vec())) {
        let headers = vec![("Content-Type".to_owned(), "application/json".to_owned())];
        let e = codec::encode(&t, &BodyFormat::Json, enc, &headers).unwrap();
        let d = codec::decode(&e.headers, &e.body);
        prop_assert_eq!(&d.structured().expect("decodes").tree, &t);
    }

    #[test]
    fn perturbation_invariants(
        kinds in prop::collection::vec(prop::sample::select(vec!["OpenApp", "AddToCart", "Search", "Purchase"]), 1..80),
        l in 1u8..4,
        min_len in 1usize..8,
        seed in any::<u64>(),
    ) {
        let rules = DghRuleSet::default_rules();
        let level = PrivacyLevel::from_u8(l).unwrap();
        let run = || {
            let mut history = Vec::new();
            let mut rng = SeededRandom::new(seed);
            let mut outcomes = Vec::new();
            for (i, kind) in kinds.iter().enumerate() {
                let ev = event(kind, i as i64 * 1000, &rules, level);
                let before = history.len();
                let seen: Vec<String> = history.iter().map(|e: &AnalyticsEvent| e.event_type.clone()).collect();
                let out = perturb(ev.clone(), &mut history, level, &mut rng, min_len, &rules).unwrap();
                assert_eq!(history.len(), before + 1);
                assert_eq!(history.last(), Some(&ev));
                let removed = out.actions.contains(&AnonymizationAction::Remove);
                let injected = out.actions.contains(&AnonymizationAction::Inject);
                let expect = if removed { 0 } else { 1 } + usize::from(injected);
                assert_eq!(out.outputs.len(), expect);
                assert!(out.outputs.iter().filter(|o| o.role == EmittedRole::Current).count() <= 1);
                if before < min_len {
                    assert_eq!(out.outputs.len(), 1);
                    assert_eq!(&out.outputs[0].event, &ev);
                }
                for o in &out.outputs {
                    if o.role != EmittedRole::Current {
                        assert!(seen.contains(&o.event.event_type), "pool closure");
                    }
                }
                outcomes.push(out);
            }
            outcomes
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn level_ordering_matches_thresholds() {
    let th: BTreeMap<PrivacyLevel, f64> = PrivacyLevel::ALL.iter().map(|l| (*l, l.threshold())).collect();
    let values: Vec<f64> = th.values().copied().collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]));
}
