//! The decoded view of one intercepted request.

use std::fmt;

use crate::codec::{self, ContentEncoding, ContentType, DecodedBody};
use crate::error::{Error, Result};

/// Header list in wire order. Names keep their original case.
pub type Headers = Vec<(String, String)>;

/// Case-insensitive lookup of the first header named `name`.
pub fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// Replaces every header named `name` with a single `name: value`, keeping the
/// position of the first occurrence (or appending).
pub fn set_header(headers: &mut Headers, name: &str, value: impl Into<String>) {
    let value = value.into();
    match headers.iter().position(|(k, _)| k.eq_ignore_ascii_case(name)) {
        Some(i) => {
            headers[i].1 = value;
            let mut idx = 0;
            headers.retain(|(k, _)| {
                let keep = idx <= i || !k.eq_ignore_ascii_case(name);
                idx += 1;
                keep
            });
        }
        None => headers.push((name.to_owned(), value)),
    }
}

pub fn remove_header(headers: &mut Headers, name: &str) {
    headers.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
}

/// Destination of a request: method, host and path (with optional query).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestUrl {
    pub method: String,
    pub scheme: String,
    pub host: String,
    pub port: Option<u16>,
    pub path: String,
    pub query: Option<String>,
}

impl RequestUrl {
    /// Parses an absolute `scheme://host[:port]/path?query` URL.
    pub fn parse(method: &str, url: &str) -> Result<Self> {
        let bad = |why: &str| Error::Decode(format!("invalid url {url:?}: {why}"));
        let (scheme, rest) = url.split_once("://").ok_or_else(|| bad("missing scheme"))?;
        let (authority, path_and_query) = match rest.find(['/', '?']) {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let authority = authority.rsplit('@').next().unwrap_or(authority);
        let (host, port) = split_host_port(authority).ok_or_else(|| bad("bad authority"))?;
        if host.is_empty() {
            return Err(bad("empty host"));
        }
        let (path, query) = match path_and_query.split_once('?') {
            Some((p, q)) => (p, Some(q.to_owned())),
            None => (path_and_query, None),
        };
        Ok(RequestUrl {
            method: method.to_ascii_uppercase(),
            scheme: scheme.to_ascii_lowercase(),
            host: host.to_ascii_lowercase(),
            port,
            path: if path.is_empty() { "/".into() } else { path.to_owned() },
            query,
        })
    }

    pub fn path_and_query(&self) -> String {
        match &self.query {
            Some(q) => format!("{}?{}", self.path, q),
            None => self.path.clone(),
        }
    }

    /// Names of the query parameters, percent-decoded.
    pub fn query_keys(&self) -> Vec<String> {
        self.query
            .as_deref()
            .map(|q| {
                form_urlencoded::parse(q.as_bytes())
                    .map(|(k, _)| k.into_owned())
                    .collect()
            })
            .unwrap_or_default()
    }
}

impl fmt::Display for RequestUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.scheme, self.host)?;
        if let Some(p) = self.port {
            write!(f, ":{p}")?;
        }
        f.write_str(&self.path_and_query())
    }
}

/// Splits `host[:port]`, handling bracketed IPv6 literals.
pub fn split_host_port(authority: &str) -> Option<(&str, Option<u16>)> {
    if let Some(rest) = authority.strip_prefix('[') {
        let (host, after) = rest.split_once(']')?;
        return match after.strip_prefix(':') {
            Some(p) => Some((host, Some(p.parse().ok()?))),
            None if after.is_empty() => Some((host, None)),
            None => None,
        };
    }
    match authority.rsplit_once(':') {
        Some((h, p)) if !h.contains(':') => Some((h, Some(p.parse().ok()?))),
        _ => Some((authority, None)),
    }
}

/// An intercepted analytics request after body decoding.
#[derive(Debug, Clone)]
pub struct ParsedRequest {
    pub app: String,
    pub url: RequestUrl,
    pub headers: Headers,
    pub content_type: ContentType,
    pub content_encoding: ContentEncoding,
    pub body: DecodedBody,
    /// The body exactly as received.
    pub raw_body: Vec<u8>,
}

impl ParsedRequest {
    pub fn new(app: impl Into<String>, url: RequestUrl, headers: Headers, raw_body: Vec<u8>) -> Self {
        let content_type = header(&headers, "content-type")
            .map(ContentType::from_header)
            .unwrap_or(ContentType::Opaque);
        let content_encoding = ContentEncoding::from_header(header(&headers, "content-encoding"));
        let body = codec::decode(&headers, &raw_body);
        ParsedRequest {
            app: app.into(),
            url,
            headers,
            content_type,
            content_encoding,
            body,
            raw_body,
        }
    }

    pub fn host(&self) -> &str {
        &self.url.host
    }
}
