use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;
use tokio_rustls::TlsAcceptor;

use anonproxy_core::config::Config;
use anonproxy_core::pipeline::{Disposition, Engine};
use anonproxy_core::request::{header, remove_header, split_host_port, Headers};
use anonproxy_core::{ParsedRequest, RequestUrl};

use crate::tls::{client_config, CertificateAuthority};
use crate::upstream::{UpstreamClient, UpstreamResponse};
use crate::ProxyError;

/// Header test clients use to name the app a request belongs to.
pub const APP_HEADER: &str = "x-app-name";
pub const DEFAULT_APP: &str = "default";

const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "proxy-connection",
    "keep-alive",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "proxy-authorization",
    "proxy-authenticate",
];

#[derive(Debug, Clone, Default)]
pub struct ProxySettings {
    pub listen: String,
    pub intercept_tls: bool,
    pub ca_out_path: Option<std::path::PathBuf>,
    pub client_apps: BTreeMap<IpAddr, String>,
    pub upstream_override: Option<String>,
    /// Extra roots trusted for upstream TLS.
    pub extra_roots: Vec<rustls::pki_types::CertificateDer<'static>>,
}

impl ProxySettings {
    pub fn from_config(cfg: &Config) -> Result<Self, ProxyError> {
        let mut client_apps = BTreeMap::new();
        for (ip, app) in &cfg.client_apps {
            let addr: IpAddr = ip
                .parse()
                .map_err(|e| ProxyError::Config(format!("client_apps key {ip:?}: {e}")))?;
            client_apps.insert(addr, app.clone());
        }
        Ok(ProxySettings {
            listen: cfg.listen.clone(),
            intercept_tls: cfg.tls.enabled,
            ca_out_path: cfg.tls.ca_out_path.clone(),
            client_apps,
            upstream_override: cfg.upstream_stub.clone(),
            extra_roots: Vec::new(),
        })
    }
}

type StreamLock = Arc<tokio::sync::Mutex<()>>;

struct Shared {
    engine: Arc<Engine>,
    ca: Option<Arc<CertificateAuthority>>,
    client_apps: BTreeMap<IpAddr, String>,
    upstream: UpstreamClient,
    streams: Mutex<HashMap<(String, String), StreamLock>>,
}

impl Shared {
    fn stream_lock(&self, app: &str, host: &str) -> StreamLock {
        self.streams
            .lock()
            .expect("stream map lock")
            .entry((app.to_owned(), host.to_owned()))
            .or_default()
            .clone()
    }

    fn app_for(&self, headers: &Headers, peer: SocketAddr) -> String {
        header(headers, APP_HEADER)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .or_else(|| self.client_apps.get(&peer.ip()).cloned())
            .unwrap_or_else(|| DEFAULT_APP.to_owned())
    }
}

/// A running proxy. Dropping the handle does not stop it; call [`shutdown`](Self::shutdown).
pub struct ProxyHandle {
    local_addr: SocketAddr,
    ca_pem: Option<String>,
    ca_der: Option<rustls::pki_types::CertificateDer<'static>>,
    engine: Arc<Engine>,
    stop: watch::Sender<bool>,
    task: tokio::task::JoinHandle<()>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// PEM of the interception CA, when TLS interception is on.
    pub fn ca_pem(&self) -> Option<&str> {
        self.ca_pem.as_deref()
    }

    pub fn ca_der(&self) -> Option<&rustls::pki_types::CertificateDer<'static>> {
        self.ca_der.as_ref()
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Stops accepting, gives open connections a moment to finish, then closes them.
    pub async fn shutdown(self) -> Arc<Engine> {
        let _ = self.stop.send(true);
        let _ = self.task.await;
        self.engine
    }
}

/// Binds the listener and starts serving in the background.
pub async fn serve(settings: ProxySettings, engine: Arc<Engine>) -> Result<ProxyHandle, ProxyError> {
    let listener = TcpListener::bind(&settings.listen)
        .await
        .map_err(|e| ProxyError::Bind(format!("{}: {e}", settings.listen)))?;
    let local_addr = listener
        .local_addr()
        .map_err(|e| ProxyError::Bind(e.to_string()))?;
    let ca = if settings.intercept_tls {
        let ca = CertificateAuthority::generate()?;
        if let Some(path) = &settings.ca_out_path {
            ca.write_pem(path)?;
        }
        Some(Arc::new(ca))
    } else {
        None
    };
    let ca_pem = ca.as_ref().map(|c| c.cert_pem().to_owned());
    let ca_der = ca.as_ref().map(|c| c.cert_der().clone());
    let shared = Arc::new(Shared {
        engine: engine.clone(),
        ca,
        client_apps: settings.client_apps,
        upstream: UpstreamClient::new(client_config(&settings.extra_roots)?, settings.upstream_override),
        streams: Mutex::new(HashMap::new()),
    });
    let (stop, mut stopped) = watch::channel(false);
    tracing::info!(addr = %local_addr, tls = shared.ca.is_some(), "proxy listening");
    let task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let shared = shared.clone();
                        conns.spawn(serve_client(shared, stream, peer));
                    }
                    Err(e) => tracing::warn!(error = %e, "accept failed"),
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
        let grace = tokio::time::sleep(Duration::from_millis(500));
        tokio::pin!(grace);
        while !conns.is_empty() {
            tokio::select! {
                _ = &mut grace => break,
                _ = conns.join_next() => {}
            }
        }
        conns.abort_all();
    });
    Ok(ProxyHandle {
        local_addr,
        ca_pem,
        ca_der,
        engine,
        stop,
        task,
    })
}

async fn serve_client(shared: Arc<Shared>, stream: TcpStream, peer: SocketAddr) {
    let _ = stream.set_nodelay(true);
    let svc_shared = shared.clone();
    let svc = service_fn(move |req| handle(svc_shared.clone(), peer, None, req));
    if let Err(e) = http1::Builder::new()
        .preserve_header_case(true)
        .serve_connection(TokioIo::new(stream), svc)
        .with_upgrades()
        .await
    {
        tracing::debug!(%peer, error = %e, "client connection ended");
    }
}

/// Where requests on an intercepted tunnel are headed.
#[derive(Debug, Clone)]
struct Tunnel {
    host: String,
    port: u16,
}

type Body = Full<Bytes>;

fn simple(status: StatusCode, text: &str) -> Response<Body> {
    let mut r = Response::new(Full::new(Bytes::from(text.to_owned())));
    *r.status_mut() = status;
    r
}

async fn handle(
    shared: Arc<Shared>,
    peer: SocketAddr,
    tunnel: Option<Tunnel>,
    req: Request<Incoming>,
) -> Result<Response<Body>, std::convert::Infallible> {
    if req.method() == Method::CONNECT && tunnel.is_none() {
        return Ok(connect(shared, peer, req));
    }
    Ok(match forward(shared, peer, tunnel, req).await {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(%peer, error = %e, "request failed");
            simple(StatusCode::BAD_REQUEST, &format!("{e}\n"))
        }
    })
}

fn connect(shared: Arc<Shared>, peer: SocketAddr, mut req: Request<Incoming>) -> Response<Body> {
    let authority = req.uri().authority().map(|a| a.to_string()).unwrap_or_default();
    let Some((host, port)) = split_host_port(&authority) else {
        return simple(StatusCode::BAD_REQUEST, "CONNECT needs host:port\n");
    };
    let tunnel = Tunnel {
        host: host.to_ascii_lowercase(),
        port: port.unwrap_or(443),
    };
    let upgrade = hyper::upgrade::on(&mut req);
    tokio::spawn(async move {
        let upgraded = match upgrade.await {
            Ok(u) => TokioIo::new(u),
            Err(e) => {
                tracing::warn!(%peer, error = %e, "CONNECT upgrade failed");
                return;
            }
        };
        match shared.ca.clone() {
            Some(ca) => intercept(shared, ca, peer, tunnel, upgraded).await,
            None => blind_tunnel(&shared, tunnel, upgraded).await,
        }
    });
    Response::new(Full::new(Bytes::new()))
}

async fn intercept<S>(shared: Arc<Shared>, ca: Arc<CertificateAuthority>, peer: SocketAddr, tunnel: Tunnel, io: S)
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let cfg = match ca.server_config(&tunnel.host) {
        Ok(c) => c,
        Err(e) => {
            tracing::error!(host = %tunnel.host, error = %e, "cannot mint leaf certificate");
            return;
        }
    };
    let tls = match TlsAcceptor::from(cfg).accept(io).await {
        Ok(t) => t,
        Err(e) => {
            tracing::warn!(%peer, host = %tunnel.host, error = %e, "TLS handshake with client failed");
            return;
        }
    };
    let svc = service_fn(move |req| handle(shared.clone(), peer, Some(tunnel.clone()), req));
    if let Err(e) = http1::Builder::new()
        .preserve_header_case(true)
        .serve_connection(TokioIo::new(tls), svc)
        .await
    {
        tracing::debug!(%peer, error = %e, "intercepted connection ended");
    }
}

async fn blind_tunnel<S>(shared: &Shared, tunnel: Tunnel, mut client: S)
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let addr = shared
        .upstream
        .override_addr()
        .map(str::to_owned)
        .unwrap_or_else(|| format!("{}:{}", tunnel.host, tunnel.port));
    match TcpStream::connect(&addr).await {
        Ok(mut server) => {
            let _ = tokio::io::copy_bidirectional(&mut client, &mut server).await;
        }
        Err(e) => tracing::warn!(%addr, error = %e, "tunnel connect failed"),
    }
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn target_url(req: &Request<Incoming>, tunnel: Option<&Tunnel>, headers: &Headers) -> Result<RequestUrl, ProxyError> {
    let method = req.method().as_str();
    let uri = req.uri();
    let path = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    let url = match (tunnel, uri.scheme_str()) {
        (Some(t), _) => {
            let port = if t.port == 443 { String::new() } else { format!(":{}", t.port) };
            format!("https://{}{port}{path}", t.host)
        }
        (None, Some(_)) => uri.to_string(),
        (None, None) => {
            let host = header(headers, "host").ok_or_else(|| ProxyError::BadRequest("missing Host".into()))?;
            format!("http://{host}{path}")
        }
    };
    RequestUrl::parse(method, &url).map_err(|e| ProxyError::BadRequest(e.to_string()))
}

async fn forward(
    shared: Arc<Shared>,
    peer: SocketAddr,
    tunnel: Option<Tunnel>,
    req: Request<Incoming>,
) -> Result<Response<Body>, ProxyError> {
    let started = Instant::now();
    let mut headers: Headers = req
        .headers()
        .iter()
        .map(|(k, v)| (k.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let url = target_url(&req, tunnel.as_ref(), &headers)?;
    let app = shared.app_for(&headers, peer);
    let chunked = header(&headers, "transfer-encoding").is_some();
    for h in HOP_BY_HOP.iter().chain([&APP_HEADER]) {
        remove_header(&mut headers, h);
    }
    let body = req
        .into_body()
        .collect()
        .await
        .map_err(|e| ProxyError::BadRequest(format!("reading body: {e}")))?
        .to_bytes()
        .to_vec();
    if chunked {
        anonproxy_core::request::set_header(&mut headers, "Content-Length", body.len().to_string());
    }

    let parsed = ParsedRequest::new(app.clone(), url.clone(), headers, body);
    let host = parsed.host().to_owned();
    let lock = shared.stream_lock(&app, &host);
    let _guard = lock.lock().await;

    let engine = &shared.engine;
    let processed = engine.process(&parsed, now_ms());
    let analytics = processed.verdict.is_analytics();
    let action = processed.action_label();

    let (status, response) = match processed.disposition {
        Disposition::Original => {
            let result = shared
                .upstream
                .send(&url, &parsed.headers, parsed.raw_body.clone())
                .await;
            if analytics {
                engine.record_forward(&app, &host, matches!(&result, Ok(r) if is_success(r.status)));
            }
            to_client(result)
        }
        Disposition::Rewritten { requests, respond_with } => {
            let mut chosen = None;
            for (i, out) in requests.into_iter().enumerate() {
                let result = shared.upstream.send(&url, &out.headers, out.body).await;
                engine.record_forward(&app, &host, matches!(&result, Ok(r) if is_success(r.status)));
                if Some(i) == respond_with {
                    chosen = Some(result);
                } else if let Err(e) = &result {
                    tracing::debug!(%app, %host, error = %e, "injected request failed");
                }
            }
            match chosen {
                Some(result) => to_client(result),
                None => (StatusCode::OK.as_u16(), Response::new(Full::new(Bytes::new()))),
            }
        }
    };
    tracing::info!(
        app = %app,
        host = %host,
        verdict = processed.verdict.label(),
        action = %action,
        status,
        latency_ms = started.elapsed().as_millis() as u64,
        "handled"
    );
    Ok(response)
}

pub fn is_success(status: u16) -> bool {
    (200..300).contains(&status)
}

fn to_client(result: Result<UpstreamResponse, ProxyError>) -> (u16, Response<Body>) {
    match result {
        Ok(up) => {
            let mut builder = Response::builder().status(up.status);
            for (k, v) in &up.headers {
                if HOP_BY_HOP.contains(&k.to_ascii_lowercase().as_str()) {
                    continue;
                }
                builder = builder.header(k.as_str(), v.as_str());
            }
            match builder.body(Full::new(up.body)) {
                Ok(r) => (up.status, r),
                Err(e) => (502, simple(StatusCode::BAD_GATEWAY, &format!("bad upstream response: {e}\n"))),
            }
        }
        Err(e) => {
            tracing::warn!(error = %e, "upstream failure");
            (502, simple(StatusCode::BAD_GATEWAY, &format!("{e}\n")))
        }
    }
}
