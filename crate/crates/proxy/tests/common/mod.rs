#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};

use anonproxy_core::detector::AnalyticsDomainDb;
use anonproxy_core::generalizer::DghRuleSet;
use anonproxy_core::pipeline::Engine;
use anonproxy_core::replay::ReplayRecord;
use anonproxy_core::PrivacyLevel;
use anonproxy_proxy::{serve, ProxyHandle, ProxySettings};

pub const CLEAN: &str = include_str!("../../../core/tests/fixtures/clean_requests.jsonl");
pub const CORPUS: &str = include_str!("../../../core/data/corpus.jsonl");

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub host: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        anonproxy_core::request::header(&self.headers, name)
    }

    /// Host without the port.
    pub fn hostname(&self) -> &str {
        self.host.split(':').next().unwrap_or("")
    }
}

pub type Validator = Arc<dyn Fn(&Recorded) -> u16 + Send + Sync>;

pub struct Stub {
    pub addr: SocketAddr,
    pub seen: Arc<Mutex<Vec<Recorded>>>,
}

impl Stub {
    pub fn seen(&self) -> Vec<Recorded> {
        self.seen.lock().unwrap().clone()
    }
}

/// Upstream that records every request and answers with the validator's status.
pub async fn stub(validator: Validator) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else { return };
            let log = log.clone();
            let validator = validator.clone();
            tokio::spawn(async move {
                let svc = service_fn(move |req: Request<hyper::body::Incoming>| {
                    let log = log.clone();
                    let validator = validator.clone();
                    async move {
                        let method = req.method().to_string();
                        let path = req.uri().path_and_query().map(|p| p.to_string()).unwrap_or_default();
                        let headers: Vec<(String, String)> = req
                            .headers()
                            .iter()
                            .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or("").to_owned()))
                            .collect();
                        let host = anonproxy_core::request::header(&headers, "host").unwrap_or("").to_owned();
                        let body = req.into_body().collect().await?.to_bytes().to_vec();
                        let rec = Recorded {
                            method,
                            host,
                            path,
                            headers,
                            body,
                        };
                        let status = validator(&rec);
                        log.lock().unwrap().push(rec);
                        let mut resp = Response::new(Full::new(Bytes::from_static(b"stub")));
                        *resp.status_mut() = hyper::StatusCode::from_u16(status).unwrap();
                        Ok::<_, hyper::Error>(resp)
                    }
                });
                let _ = http1::Builder::new().serve_connection(TokioIo::new(stream), svc).await;
            });
        }
    });
    Stub { addr, seen }
}

pub fn accept_all() -> Validator {
    Arc::new(|_| 200)
}

pub fn engine(levels: &[(&str, PrivacyLevel)], seed: u64) -> Arc<Engine> {
    let levels: BTreeMap<String, PrivacyLevel> = levels.iter().map(|(a, l)| ((*a).to_owned(), *l)).collect();
    let mut e = Engine::new(AnalyticsDomainDb::default_hosts(), DghRuleSet::default_rules(), levels, 5, Some(seed));
    e.learn_hosts = false;
    Arc::new(e)
}

pub async fn proxy(engine: Arc<Engine>, upstream: SocketAddr, tls: bool) -> ProxyHandle {
    let settings = ProxySettings {
        listen: "127.0.0.1:0".into(),
        intercept_tls: tls,
        upstream_override: Some(upstream.to_string()),
        ..Default::default()
    };
    serve(settings, engine).await.unwrap()
}

pub fn records(text: &str) -> Vec<ReplayRecord> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

async fn exchange<S>(io: S, req: Request<Full<Bytes>>) -> (u16, Vec<u8>)
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(io)).await.unwrap();
    let conn = tokio::spawn(conn);
    let resp = sender.send_request(req).await.unwrap();
    let status = resp.status().as_u16();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    drop(sender);
    conn.abort();
    (status, body)
}

fn build(rec: &ReplayRecord, uri: &str, host: &str) -> Request<Full<Bytes>> {
    let mut b = Request::builder()
        .method(rec.method.as_str())
        .uri(uri)
        .header("Host", host)
        .header(anonproxy_proxy::APP_HEADER, rec.app.as_str());
    for (k, v) in &rec.headers {
        b = b.header(k.as_str(), v.as_str());
    }
    b.body(Full::new(Bytes::from(rec.body_bytes().unwrap()))).unwrap()
}

/// Sends `rec` through the proxy as a plain absolute-form request.
pub async fn send(proxy: SocketAddr, rec: &ReplayRecord) -> (u16, Vec<u8>) {
    let url = anonproxy_core::RequestUrl::parse(&rec.method, &rec.url).unwrap();
    let stream = TcpStream::connect(proxy).await.unwrap();
    exchange(stream, build(rec, &rec.url, &url.host)).await
}

/// Sends `rec` inside a `CONNECT` tunnel, trusting only `ca`.
pub async fn send_tls(
    proxy: SocketAddr,
    ca: &rustls::pki_types::CertificateDer<'static>,
    rec: &ReplayRecord,
) -> (u16, Vec<u8>) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let url = anonproxy_core::RequestUrl::parse(&rec.method, &rec.url).unwrap();
    let mut stream = TcpStream::connect(proxy).await.unwrap();
    let connect = format!("CONNECT {0}:443 HTTP/1.1\r\nHost: {0}:443\r\n\r\n", url.host);
    stream.write_all(connect.as_bytes()).await.unwrap();
    let mut head = Vec::new();
    let mut byte = [0u8; 1];
    while !head.ends_with(b"\r\n\r\n") {
        stream.read_exact(&mut byte).await.unwrap();
        head.push(byte[0]);
    }
    assert!(head.starts_with(b"HTTP/1.1 200"), "{}", String::from_utf8_lossy(&head));

    let mut roots = rustls::RootCertStore::empty();
    roots.add(ca.clone()).unwrap();
    let cfg = rustls::ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_safe_default_protocol_versions()
        .unwrap()
        .with_root_certificates(roots)
        .with_no_client_auth();
    let name = rustls::pki_types::ServerName::try_from(url.host.clone()).unwrap();
    let tls = tokio_rustls::TlsConnector::from(Arc::new(cfg))
        .connect(name, stream)
        .await
        .unwrap();
    exchange(tls, build(rec, &url.path_and_query(), &url.host)).await
}
