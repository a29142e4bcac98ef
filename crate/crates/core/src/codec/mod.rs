//! Body codecs for the content types analytics SDKs actually send:
//! `application/x-www-form-urlencoded`, `application/json` and
//! `multipart/form-data`, optionally compressed with gzip or deflate.
//!
//! Decoding produces an order-preserving [`Value`] tree; encoding turns a
//! (possibly rewritten) tree back into the original wire form. Anything else
//! is [`DecodedBody::Opaque`] and must be forwarded untouched.

mod compression;
pub mod multipart;

use crate::error::{Error, Result};
use crate::model::{Attributes, Value};
use crate::request::{header, remove_header, set_header, Headers};

pub use compression::{compress, decompress};
pub use multipart::MultipartMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContentType {
    FormUrlEncoded,
    Json,
    MultipartFormData,
    Opaque,
}

impl ContentType {
    pub fn from_header(value: &str) -> Self {
        let media = value.split(';').next().unwrap_or("").trim();
        if media.eq_ignore_ascii_case("application/x-www-form-urlencoded") {
            ContentType::FormUrlEncoded
        } else if media.eq_ignore_ascii_case("application/json") {
            ContentType::Json
        } else if media.eq_ignore_ascii_case("multipart/form-data") {
            ContentType::MultipartFormData
        } else {
            ContentType::Opaque
        }
    }

    pub fn media_type(self) -> Option<&'static str> {
        match self {
            ContentType::FormUrlEncoded => Some("application/x-www-form-urlencoded"),
            ContentType::Json => Some("application/json"),
            ContentType::MultipartFormData => Some("multipart/form-data"),
            ContentType::Opaque => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ContentEncoding {
    #[default]
    Identity,
    Gzip,
    Deflate,
}

impl ContentEncoding {
    pub const ALL: [ContentEncoding; 3] = [
        ContentEncoding::Identity,
        ContentEncoding::Gzip,
        ContentEncoding::Deflate,
    ];

    /// `None` means the header names an encoding we cannot undo (e.g. `br`).
    pub fn parse(value: Option<&str>) -> Option<Self> {
        match value.map(|v| v.trim().to_ascii_lowercase()).as_deref() {
            None | Some("") | Some("identity") => Some(ContentEncoding::Identity),
            Some("gzip") | Some("x-gzip") => Some(ContentEncoding::Gzip),
            Some("deflate") => Some(ContentEncoding::Deflate),
            Some(_) => None,
        }
    }

    /// Lenient form of [`parse`](Self::parse) used for reporting.
    pub fn from_header(value: Option<&str>) -> Self {
        Self::parse(value).unwrap_or_default()
    }

    pub fn header_value(self) -> Option<&'static str> {
        match self {
            ContentEncoding::Identity => None,
            ContentEncoding::Gzip => Some("gzip"),
            ContentEncoding::Deflate => Some("deflate"),
        }
    }
}

/// How a structured body was laid out on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BodyFormat {
    Json,
    FormUrlEncoded,
    Multipart(MultipartMeta),
}

impl BodyFormat {
    pub fn content_type(&self) -> ContentType {
        match self {
            BodyFormat::Json => ContentType::Json,
            BodyFormat::FormUrlEncoded => ContentType::FormUrlEncoded,
            BodyFormat::Multipart(_) => ContentType::MultipartFormData,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredBody {
    pub tree: Value,
    pub format: BodyFormat,
    pub encoding: ContentEncoding,
}

impl StructuredBody {
    /// The root as an ordered map, when the body is an object.
    pub fn attributes(&self) -> Option<&Attributes> {
        self.tree.as_tree()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodedBody {
    Structured(StructuredBody),
    /// Unsupported content type or encoding; the raw bytes must pass through.
    Opaque,
    /// Supported type whose payload could not be decoded.
    Failed(String),
}

impl DecodedBody {
    pub fn structured(&self) -> Option<&StructuredBody> {
        match self {
            DecodedBody::Structured(b) => Some(b),
            _ => None,
        }
    }
}

/// Decodes a request body according to its `Content-Type` and
/// `Content-Encoding` headers. Never fails: problems are reported through the
/// returned variant.
pub fn decode(headers: &[(String, String)], body: &[u8]) -> DecodedBody {
    match try_decode(headers, body) {
        Ok(Some(b)) => DecodedBody::Structured(b),
        Ok(None) => DecodedBody::Opaque,
        Err(e) => DecodedBody::Failed(e.to_string()),
    }
}

/// `Ok(None)` for unsupported combinations, `Err` for corrupt payloads.
pub fn try_decode(headers: &[(String, String)], body: &[u8]) -> Result<Option<StructuredBody>> {
    let Some(ct_header) = header(headers, "content-type") else {
        return Ok(None);
    };
    let Some(encoding) = ContentEncoding::parse(header(headers, "content-encoding")) else {
        return Ok(None);
    };
    let content_type = ContentType::from_header(ct_header);
    if content_type == ContentType::Opaque {
        return Ok(None);
    }
    let plain = decompress(encoding, body)?;
    let (tree, format) = match content_type {
        ContentType::Json => (decode_json(&plain)?, BodyFormat::Json),
        ContentType::FormUrlEncoded => (decode_form(&plain), BodyFormat::FormUrlEncoded),
        ContentType::MultipartFormData => {
            let boundary = multipart::header_param(ct_header, "boundary")
                .filter(|b| !b.is_empty())
                .ok_or_else(|| Error::Decode("multipart body without boundary".into()))?;
            let (fields, meta) = multipart::decode(&boundary, &plain)?;
            (Value::Tree(fields), BodyFormat::Multipart(meta))
        }
        ContentType::Opaque => unreachable!(),
    };
    Ok(Some(StructuredBody {
        tree,
        format,
        encoding,
    }))
}

fn decode_json(plain: &[u8]) -> Result<Value> {
    serde_json::from_slice::<serde_json::Value>(plain)
        .map(Value::from)
        .map_err(|e| Error::Decode(format!("invalid JSON body: {e}")))
}

fn decode_form(plain: &[u8]) -> Value {
    Value::Tree(
        form_urlencoded::parse(plain)
            .map(|(k, v)| (k.into_owned(), Value::String(v.into_owned())))
            .collect(),
    )
}

/// Serializes `tree` in `format` and applies `encoding`. Returns the wire body
/// and the boundary used (multipart only).
pub fn encode_body(
    tree: &Value,
    format: &BodyFormat,
    encoding: ContentEncoding,
) -> Result<(Vec<u8>, Option<String>)> {
    let (plain, boundary) = match format {
        BodyFormat::Json => (
            serde_json::to_vec(&serde_json::Value::try_from(tree)?)
                .map_err(|e| Error::Encode(e.to_string()))?,
            None,
        ),
        BodyFormat::FormUrlEncoded => (encode_form(tree)?, None),
        BodyFormat::Multipart(meta) => {
            let fields = tree
                .as_tree()
                .ok_or_else(|| Error::Encode("multipart body must be an object".into()))?;
            let (bytes, boundary) = multipart::encode(fields, meta)?;
            (bytes, Some(boundary))
        }
    };
    Ok((compress(encoding, &plain)?, boundary))
}

fn encode_form(tree: &Value) -> Result<Vec<u8>> {
    let fields = tree
        .as_tree()
        .ok_or_else(|| Error::Encode("urlencoded body must be an object".into()))?;
    let mut ser = form_urlencoded::Serializer::new(String::new());
    for (k, v) in fields.iter() {
        let text = match v {
            Value::String(s) | Value::Number(s) => s.clone(),
            Value::Bool(b) => b.to_string(),
            Value::Null => String::new(),
            Value::List(_) | Value::Tree(_) => {
                return Err(Error::Encode(format!(
                    "urlencoded field {k:?} holds a nested value"
                )))
            }
        };
        ser.append_pair(k, &text);
    }
    Ok(ser.finish().into_bytes())
}

/// A re-encoded request body together with its adjusted headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBody {
    pub body: Vec<u8>,
    pub headers: Headers,
}

/// Encodes `tree` like [`encode_body`] and rewrites `Content-Length`,
/// `Content-Encoding` and (for multipart) the `Content-Type` boundary in a
/// copy of `headers`.
pub fn encode(
    tree: &Value,
    format: &BodyFormat,
    encoding: ContentEncoding,
    headers: &[(String, String)],
) -> Result<EncodedBody> {
    let (body, boundary) = encode_body(tree, format, encoding)?;
    let mut headers = headers.to_vec();
    remove_header(&mut headers, "transfer-encoding");
    match encoding.header_value() {
        Some(v) => set_header(&mut headers, "Content-Encoding", v),
        None => remove_header(&mut headers, "content-encoding"),
    }
    if let Some(boundary) = boundary {
        let unchanged = matches!(format, BodyFormat::Multipart(m) if m.boundary == boundary);
        if !unchanged || header(&headers, "content-type").is_none() {
            set_header(
                &mut headers,
                "Content-Type",
                format!("multipart/form-data; boundary={boundary}"),
            );
        }
    } else if header(&headers, "content-type").is_none() {
        if let Some(media) = format.content_type().media_type() {
            set_header(&mut headers, "Content-Type", media);
        }
    }
    set_header(&mut headers, "Content-Length", body.len().to_string());
    Ok(EncodedBody { body, headers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdrs(ct: &str, ce: Option<&str>) -> Headers {
        let mut h = vec![("Content-Type".to_owned(), ct.to_owned())];
        if let Some(ce) = ce {
            h.push(("Content-Encoding".to_owned(), ce.to_owned()));
        }
        h
    }

    fn tree(body: &DecodedBody) -> &Value {
        &body.structured().expect("structured").tree
    }

    #[test]
    fn json_keeps_key_order() {
        let body = decode(
            &hdrs("application/json; charset=utf-8", None),
            br#"{"event_type":"AddToCart","price":"300"}"#,
        );
        let keys: Vec<_> = tree(&body).as_tree().unwrap().keys().collect();
        assert_eq!(keys, ["event_type", "price"]);
    }

    #[test]
    fn urlencoded_fields() {
        let body = decode(
            &hdrs("application/x-www-form-urlencoded", None),
            b"event=MOBILE_APP_INSTALL&uid=1",
        );
        assert_eq!(
            tree(&body),
            &Value::Tree(Attributes::new().with("event", "MOBILE_APP_INSTALL").with("uid", "1"))
        );
    }

    #[test]
    fn gzip_json_matches_identity() {
        let plain = br#"{"event_type":"AddToCart","data":{"price":"300"}}"#;
        let gz = compress(ContentEncoding::Gzip, plain).unwrap();
        let a = decode(&hdrs("application/json", None), plain);
        let b = decode(&hdrs("application/json", Some("gzip")), &gz);
        assert_eq!(tree(&a), tree(&b));
    }

    #[test]
    fn form_encode_sets_length() {
        let t = Value::Tree(Attributes::new().with("a", "1"));
        let out = encode(&t, &BodyFormat::FormUrlEncoded, ContentEncoding::Identity, &[]).unwrap();
        assert_eq!(out.body, b"a=1");
        assert_eq!(header(&out.headers, "content-length"), Some("3"));
        assert_eq!(header(&out.headers, "content-encoding"), None);
    }

    #[test]
    fn nested_tree_in_form_is_an_encode_error() {
        let t = Value::Tree(Attributes::new().with("a", Attributes::new().with("b", "c")));
        assert!(matches!(
            encode_body(&t, &BodyFormat::FormUrlEncoded, ContentEncoding::Identity),
            Err(Error::Encode(_))
        ));
    }

    #[test]
    fn unsupported_inputs_are_opaque() {
        assert_eq!(decode(&hdrs("application/x-protobuf", None), b"\x0a\x03abc"), DecodedBody::Opaque);
        assert_eq!(decode(&hdrs("application/json", Some("br")), b"{}"), DecodedBody::Opaque);
        assert_eq!(decode(&[], b"{}"), DecodedBody::Opaque);
    }

    #[test]
    fn corrupt_payloads_fail() {
        assert!(matches!(
            decode(&hdrs("application/json", Some("gzip")), b"\x1f\x8b garbage"),
            DecodedBody::Failed(_)
        ));
        assert!(matches!(
            decode(&hdrs("application/json", None), b"{not json"),
            DecodedBody::Failed(_)
        ));
        assert!(matches!(
            decode(&hdrs("multipart/form-data", None), b"--x\r\n"),
            DecodedBody::Failed(_)
        ));
    }

    #[test]
    fn encoding_header_follows_reapplied_encoding() {
        let t = Value::Tree(Attributes::new().with("a", "1"));
        let h = hdrs("application/x-www-form-urlencoded", Some("gzip"));
        let out = encode(&t, &BodyFormat::FormUrlEncoded, ContentEncoding::Deflate, &h).unwrap();
        assert_eq!(header(&out.headers, "content-encoding"), Some("deflate"));
        let back = decode(&out.headers, &out.body);
        assert_eq!(tree(&back), &t);
    }

    #[test]
    fn large_numbers_round_trip_exactly() {
        let raw = br#"{"latest_install_time":1609930857411,"ratio":0.10}"#;
        let body = decode(&hdrs("application/json", None), raw);
        let s = body.structured().unwrap();
        let (out, _) = encode_body(&s.tree, &s.format, s.encoding).unwrap();
        assert_eq!(out, raw);
    }
}
