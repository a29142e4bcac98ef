//! One-shot HTTP/1.1 client used to deliver requests to their origin.

use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1;
use hyper_util::rt::TokioIo;
use rustls::pki_types::ServerName;
use rustls::ClientConfig;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio_rustls::TlsConnector;

use anonproxy_core::request::{header, Headers};
use anonproxy_core::RequestUrl;

use crate::ProxyError;

const TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamResponse {
    pub status: u16,
    pub headers: Headers,
    pub body: Bytes,
}

#[derive(Clone)]
pub struct UpstreamClient {
    tls: Arc<ClientConfig>,
    /// When set, every request goes to this `host:port` over plain HTTP.
    override_addr: Option<String>,
}

impl std::fmt::Debug for UpstreamClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UpstreamClient")
            .field("override_addr", &self.override_addr)
            .finish_non_exhaustive()
    }
}

impl UpstreamClient {
    pub fn new(tls: Arc<ClientConfig>, override_addr: Option<String>) -> Self {
        UpstreamClient { tls, override_addr }
    }

    pub fn override_addr(&self) -> Option<&str> {
        self.override_addr.as_deref()
    }

    /// Sends one request and reads the whole response.
    pub async fn send(
        &self,
        url: &RequestUrl,
        headers: &Headers,
        body: Vec<u8>,
    ) -> Result<UpstreamResponse, ProxyError> {
        tokio::time::timeout(TIMEOUT, self.send_inner(url, headers, body))
            .await
            .map_err(|_| ProxyError::Upstream(format!("{} timed out", url.host)))?
    }

    async fn send_inner(
        &self,
        url: &RequestUrl,
        headers: &Headers,
        body: Vec<u8>,
    ) -> Result<UpstreamResponse, ProxyError> {
        let https = url.scheme.eq_ignore_ascii_case("https");
        let port = url.port.unwrap_or(if https { 443 } else { 80 });
        let addr = match &self.override_addr {
            Some(a) => a.clone(),
            None if url.host.contains(':') => format!("[{}]:{port}", url.host),
            None => format!("{}:{port}", url.host),
        };
        let tcp = TcpStream::connect(&addr)
            .await
            .map_err(|e| ProxyError::Upstream(format!("connect {addr}: {e}")))?;
        let _ = tcp.set_nodelay(true);
        let req = build_request(url, headers, body)?;
        if https && self.override_addr.is_none() {
            let name = ServerName::try_from(url.host.clone())
                .map_err(|e| ProxyError::Upstream(format!("server name {}: {e}", url.host)))?;
            let tls = TlsConnector::from(self.tls.clone())
                .connect(name, tcp)
                .await
                .map_err(|e| ProxyError::Upstream(format!("tls {addr}: {e}")))?;
            exchange(tls, req).await
        } else {
            exchange(tcp, req).await
        }
    }
}

fn build_request(
    url: &RequestUrl,
    headers: &Headers,
    body: Vec<u8>,
) -> Result<hyper::Request<Full<Bytes>>, ProxyError> {
    let mut builder = hyper::Request::builder()
        .method(url.method.as_str())
        .uri(url.path_and_query());
    for (k, v) in headers {
        builder = builder.header(k.as_str(), v.as_str());
    }
    if header(headers, "host").is_none() {
        let host = match url.port {
            Some(p) => format!("{}:{p}", url.host),
            None => url.host.clone(),
        };
        builder = builder.header("Host", host);
    }
    builder
        .body(Full::new(Bytes::from(body)))
        .map_err(|e| ProxyError::Upstream(format!("invalid request: {e}")))
}

async fn exchange<S>(io: S, req: hyper::Request<Full<Bytes>>) -> Result<UpstreamResponse, ProxyError>
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let up = |e: hyper::Error| ProxyError::Upstream(e.to_string());
    let (mut sender, conn) = http1::Builder::new()
        .preserve_header_case(true)
        .handshake(TokioIo::new(io))
        .await
        .map_err(up)?;
    let conn = tokio::spawn(async move {
        if let Err(e) = conn.await {
            tracing::debug!(error = %e, "upstream connection closed");
        }
    });
    let resp = sender.send_request(req).await.map_err(up)?;
    let status = resp.status().as_u16();
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let body = resp.into_body().collect().await.map_err(up)?.to_bytes();
    drop(sender);
    conn.abort();
    Ok(UpstreamResponse {
        status,
        headers,
        body,
    })
}
