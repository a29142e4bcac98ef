//! Delivery of replayed requests to a plain-HTTP stub server.

use std::time::Duration;

use anonproxy_core::replay::{ReplayRecord, Upstream};
use anonproxy_core::{Error, RequestUrl};

/// `host:port` of a stub URL such as `http://127.0.0.1:9000`.
pub fn authority(url: &str) -> anyhow::Result<String> {
    let rest = match url.split_once("://") {
        Some((scheme, rest)) if scheme.eq_ignore_ascii_case("http") => rest,
        Some((scheme, _)) => anyhow::bail!("--upstream-stub {url:?}: only http is supported, got {scheme}"),
        None => url,
    };
    let host = rest.split('/').next().unwrap_or("");
    if host.is_empty() {
        anyhow::bail!("--upstream-stub {url:?}: missing host");
    }
    Ok(if host.contains(':') { host.to_owned() } else { format!("{host}:80") })
}

pub struct HttpStub {
    agent: ureq::Agent,
    authority: String,
}

impl HttpStub {
    pub fn new(authority: &str) -> Self {
        HttpStub {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(15)).build(),
            authority: authority.to_owned(),
        }
    }
}

impl Upstream for HttpStub {
    fn send(&self, record: &ReplayRecord, body: &[u8]) -> anonproxy_core::Result<u16> {
        let url = RequestUrl::parse(&record.method, &record.url)?;
        let mut req = self
            .agent
            .request(&record.method, &format!("http://{}{}", self.authority, url.path_and_query()));
        for (k, v) in &record.headers {
            if k.eq_ignore_ascii_case("content-length") || k.eq_ignore_ascii_case("host") {
                continue;
            }
            req = req.set(k, v);
        }
        req = req.set("Host", &url.host);
        match req.send_bytes(body) {
            Ok(resp) => Ok(resp.status()),
            Err(ureq::Error::Status(code, _)) => Ok(code),
            Err(e) => Err(Error::Upstream(e.to_string())),
        }
    }
}
