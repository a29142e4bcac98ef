use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use anonproxy_core::evaluator::RunReport;

const BIN: &str = env!("CARGO_BIN_EXE_anonproxy");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn corpus() -> String {
    std::fs::read_to_string(data("corpus.jsonl")).unwrap()
}

fn corpus_apps() -> BTreeSet<String> {
    corpus()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["app"].as_str().unwrap().to_owned())
        .collect()
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "host_list_path": data("analytics_hosts.json"),
        "dgh_rules_path": data("dgh_rules.json"),
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn all_high() -> serde_json::Value {
    let levels: serde_json::Map<String, serde_json::Value> =
        corpus_apps().into_iter().map(|a| (a, "HIGH".into())).collect();
    serde_json::json!({ "per_app_levels": levels })
}

fn anonproxy(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ANONPROXY_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Minimal keep-alive HTTP/1.1 server answering 200 and counting requests.
fn http_stub() -> (SocketAddr, Arc<AtomicU64>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicU64::new(0));
    let c = count.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { return };
            let c = c.clone();
            thread::spawn(move || serve_stub(stream, &c));
        }
    });
    (addr, count)
}

fn serve_stub(stream: TcpStream, count: &AtomicU64) {
    let mut out = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    loop {
        let mut len = 0usize;
        let mut first = true;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            if line == "\r\n" && !first {
                break;
            }
            first = false;
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        count.fetch_add(1, Ordering::SeqCst);
        if out.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok").is_err() {
            return;
        }
    }
}

#[test]
fn missing_rules_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, format!(r#"{{"host_list_path": {:?}}}"#, data("analytics_hosts.json"))).unwrap();
    for cmd in ["serve", "replay"] {
        let mut args = vec![cmd, "--config", path.to_str().unwrap()];
        if cmd == "replay" {
            args.push("input.jsonl");
        }
        let o = anonproxy(&args);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("dgh_rules_path"), "{}", stderr(&o));
    }
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, "{\n  \"host_list_path\": \"h.json\",\n  \"min_len\": \"five\"\n}\n").unwrap();
    let o = anonproxy(&["replay", "x", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3 column"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_bad_overrides_exit_2() {
    let o = anonproxy(&["replay", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ANONPROXY_CONFIG"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let o = anonproxy(&["replay", "x", "--config", cfg.to_str().unwrap(), "--level", "app=EXTREME"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn none_level_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "rng_seed": 1 }));
    let out = dir.path().join("out.jsonl");
    let report = dir.path().join("report.json");
    let o = anonproxy(&[
        "replay",
        data("corpus.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), corpus());
    let report = RunReport::from_json(&std::fs::read_to_string(&report).unwrap(), "report").unwrap();
    assert_eq!(report.mean_kl(), Some(0.0));
}

#[test]
fn seeded_replay_is_deterministic_and_anonymizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), all_high());
    let run = |tag: &str, seed: &str| {
        let out = dir.path().join(format!("out-{tag}.jsonl"));
        let report = dir.path().join(format!("report-{tag}.json"));
        let o = anonproxy(&[
            "replay",
            data("corpus.jsonl").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (std::fs::read(&out).unwrap(), std::fs::read(&report).unwrap())
    };
    let a = run("a", "42");
    let b = run("b", "42");
    let c = run("c", "43");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_ne!(a.0, corpus().into_bytes());
    let report = RunReport::from_json(std::str::from_utf8(&a.1).unwrap(), "report").unwrap();
    assert!(report.mean_kl().unwrap() > 0.0);
    assert_eq!(report.seed, Some(42));
    for m in &report.apps {
        m.check_conservation().unwrap();
    }
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let o = Command::new(BIN)
        .args(["replay", data("corpus.jsonl").to_str().unwrap()])
        .env("ANONPROXY_CONFIG", &cfg)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), corpus());
}

#[test]
fn malformed_record_aborts_with_its_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let input = dir.path().join("bad.jsonl");
    let first = corpus().lines().next().unwrap().to_owned();
    std::fs::write(&input, format!("{first}\n{{\"app\": 5}}\n")).unwrap();
    let o = anonproxy(&["replay", input.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("replay record 2"), "{}", stderr(&o));
}

#[test]
fn replay_delivers_to_an_upstream_stub() {
    let (addr, count) = http_stub();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), all_high());
    let report = dir.path().join("r.json");
    let input = dir.path().join("in.jsonl");
    let head: String = corpus().lines().take(300).map(|l| format!("{l}\n")).collect();
    std::fs::write(&input, head).unwrap();
    let o = anonproxy(&[
        "replay",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--upstream-stub",
        &format!("http://{addr}"),
        "--report",
        report.to_str().unwrap(),
        "--out",
        dir.path().join("o.jsonl").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = RunReport::from_json(&std::fs::read_to_string(&report).unwrap(), "r").unwrap();
    let emitted: u64 = report.apps.iter().map(|m| m.total_emitted).sum();
    let accepted: u64 = report.apps.iter().map(|m| m.accepted).sum();
    assert_eq!(count.load(Ordering::SeqCst), emitted);
    assert_eq!(accepted, emitted);
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = anonproxy(&["gen-corpus", "--events", "1000", "--apps", "3", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 1000);
    let o = anonproxy(&["gen-corpus"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), corpus());
    let o = anonproxy(&["gen-corpus", "--events", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_renders_saved_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), all_high());
    let report = dir.path().join("r.json");
    let o = anonproxy(&[
        "replay",
        data("corpus.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--report",
        report.to_str().unwrap(),
        "--out",
        dir.path().join("o.jsonl").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = anonproxy(&["report", report.to_str().unwrap(), "--format", "csv"]);
    let csv = String::from_utf8(csv.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,TH,mean_inj,mean_rem,mean_rep,mean_total,mean_dkl"));
    assert!(lines.next().unwrap().starts_with("HIGH,0.25,"));
    let table = String::from_utf8(anonproxy(&["report", report.to_str().unwrap()]).stdout).unwrap();
    assert!(table.contains("HIGH"));
    let acc = String::from_utf8(anonproxy(&["report", report.to_str().unwrap(), "--format", "acceptance"]).stdout).unwrap();
    assert!(acc.starts_with("host,forwarded,accepted,rate\n"));
    assert!(acc.lines().last().unwrap().starts_with("overall,"));
    let o = anonproxy(&["report", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[cfg(unix)]
#[test]
fn serve_writes_the_report_on_interrupt() {
    let (stub, count) = http_stub();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("serve-report.json");
    let mut extra = all_high();
    extra["listen"] = "127.0.0.1:0".into();
    extra["rng_seed"] = 3.into();
    extra["report_out_path"] = report.to_str().unwrap().into();
    extra["upstream_stub"] = stub.to_string().into();
    let cfg = write_config(dir.path(), extra);
    let mut child = Command::new(BIN)
        .args(["serve", "--config", cfg.to_str().unwrap()])
        .env("RUST_LOG", "info")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_owned();

    let records: Vec<serde_json::Value> = corpus().lines().take(60).map(|l| serde_json::from_str(l).unwrap()).collect();
    for rec in &records {
        let rec: anonproxy_core::replay::ReplayRecord = serde_json::from_value(rec.clone()).unwrap();
        let body = rec.body_bytes().unwrap();
        let url = anonproxy_core::RequestUrl::parse(&rec.method, &rec.url).unwrap();
        let mut head = format!(
            "{} {} HTTP/1.1\r\nHost: {}\r\nX-App-Name: {}\r\nContent-Length: {}\r\nConnection: close\r\n",
            rec.method,
            rec.url,
            url.host,
            rec.app,
            body.len()
        );
        for (k, v) in &rec.headers {
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        head.push_str("\r\n");
        let mut s = TcpStream::connect(&addr).unwrap();
        s.write_all(head.as_bytes()).unwrap();
        s.write_all(&body).unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    }

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let mut err = String::new();
    child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert!(child.wait().unwrap().success(), "{err}");
    assert!(err.lines().filter(|l| l.contains("handled")).count() >= records.len(), "{err}");
    let report = RunReport::from_json(&std::fs::read_to_string(&report).unwrap(), "serve").unwrap();
    let emitted: u64 = report.apps.iter().map(|m| m.total_emitted).sum();
    assert_eq!(count.load(Ordering::SeqCst), emitted);
    for m in &report.apps {
        m.check_conservation().unwrap();
        assert_eq!(m.forwarded, m.total_emitted);
    }
}
