//! `multipart/form-data` bodies.
//!
//! Text fields (no filename, UTF-8 content) become tree entries. Every other
//! part is kept verbatim in [`MultipartMeta`] and re-emitted at its position.

use crate::error::{Error, Result};
use crate::model::{Attributes, Value};

/// Part headers and content, ready to serialize.
type RawPart = (Vec<(String, String)>, Vec<u8>);

/// Part layout of a decoded body. The default value describes a body with no
/// parts, for building multipart requests from scratch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MultipartMeta {
    pub boundary: String,
    pub parts: Vec<PartMeta>,
    /// The fields as decoded, used to detect whether anything changed.
    pub original_fields: Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMeta {
    /// Raw part header lines (`name`, `value`).
    pub headers: Vec<(String, String)>,
    pub name: Option<String>,
    pub kind: PartKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartKind {
    /// Content lives in the attribute tree.
    Field,
    /// File upload or non-UTF-8 content, carried through untouched.
    Raw(Vec<u8>),
}

fn find(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from > haystack.len() {
        return None;
    }
    haystack[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

/// Extracts a parameter (e.g. `name`) from a header value like
/// `form-data; name="field"; filename="a.txt"`.
pub fn header_param(value: &str, param: &str) -> Option<String> {
    let mut rest = value;
    while let Some(i) = rest.find(';') {
        rest = rest[i + 1..].trim_start();
        let Some((k, v)) = rest.split_once('=') else {
            continue;
        };
        if !k.trim().eq_ignore_ascii_case(param) {
            continue;
        }
        let v = v.trim_start();
        if let Some(quoted) = v.strip_prefix('"') {
            let mut out = String::new();
            let mut chars = quoted.chars();
            while let Some(c) = chars.next() {
                match c {
                    '\\' => out.extend(chars.next()),
                    '"' => return Some(out),
                    c => out.push(c),
                }
            }
            return Some(out);
        }
        let end = v.find(';').unwrap_or(v.len());
        return Some(v[..end].trim().to_owned());
    }
    None
}

pub fn decode(boundary: &str, body: &[u8]) -> Result<(Attributes, MultipartMeta)> {
    let err = |why: &str| Error::Decode(format!("multipart: {why}"));
    let delim = format!("--{boundary}");
    let delim = delim.as_bytes();
    let mut pos = if body.starts_with(delim) {
        0
    } else {
        find(body, &[b"\r\n", delim].concat(), 0).ok_or_else(|| err("no opening boundary"))? + 2
    };
    let mut fields = Attributes::new();
    let mut parts = Vec::new();
    loop {
        pos += delim.len();
        if body[pos..].starts_with(b"--") {
            break;
        }
        // Transport padding after the delimiter is allowed.
        while matches!(body.get(pos), Some(b' ' | b'\t')) {
            pos += 1;
        }
        if !body[pos..].starts_with(b"\r\n") {
            return Err(err("malformed boundary line"));
        }
        pos += 2;
        let header_end = if body[pos..].starts_with(b"\r\n") {
            pos
        } else {
            find(body, b"\r\n\r\n", pos).ok_or_else(|| err("unterminated part headers"))? + 2
        };
        let header_text = std::str::from_utf8(&body[pos..header_end])
            .map_err(|_| err("part headers are not UTF-8"))?;
        let mut headers = Vec::new();
        for line in header_text.split("\r\n").filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| err("bad part header"))?;
            headers.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let content_start = header_end + 2;
        let next = find(body, &[b"\r\n", delim].concat(), content_start)
            .ok_or_else(|| err("missing closing boundary"))?;
        let content = &body[content_start..next];
        pos = next + 2;

        let disposition = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-disposition"))
            .map(|(_, v)| v.as_str());
        let name = disposition.and_then(|d| header_param(d, "name"));
        let is_file = disposition.is_some_and(|d| header_param(d, "filename").is_some());
        let kind = match (&name, is_file, std::str::from_utf8(content)) {
            (Some(n), false, Ok(text)) => {
                fields.push(n.clone(), Value::String(text.to_owned()));
                PartKind::Field
            }
            _ => PartKind::Raw(content.to_vec()),
        };
        parts.push(PartMeta {
            headers,
            name,
            kind,
        });
    }
    let meta = MultipartMeta {
        boundary: boundary.to_owned(),
        parts,
        original_fields: fields.clone(),
    };
    Ok((fields, meta))
}

fn field_text(key: &str, value: &Value) -> Result<String> {
    match value {
        Value::String(s) | Value::Number(s) => Ok(s.clone()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Null => Ok(String::new()),
        Value::List(_) | Value::Tree(_) => Err(Error::Encode(format!(
            "multipart field {key:?} holds a nested value"
        ))),
    }
}

fn disposition_for(name: &str) -> (String, String) {
    let escaped = name.replace('\\', "\\\\").replace('"', "%22");
    (
        "Content-Disposition".to_owned(),
        format!("form-data; name=\"{escaped}\""),
    )
}

/// Serializes `fields` using the part layout in `meta`. Returns the body and
/// the boundary actually used.
pub fn encode(fields: &Attributes, meta: &MultipartMeta) -> Result<(Vec<u8>, String)> {
    let mut parts: Vec<RawPart> = Vec::new();
    let mut entries = fields.iter();
    for part in &meta.parts {
        match &part.kind {
            PartKind::Raw(bytes) => parts.push((part.headers.clone(), bytes.clone())),
            PartKind::Field => {
                let Some((key, value)) = entries.next() else {
                    continue;
                };
                let headers = if part.name.as_deref() == Some(key.as_str()) {
                    part.headers.clone()
                } else {
                    vec![disposition_for(key)]
                };
                parts.push((headers, field_text(key, value)?.into_bytes()));
            }
        }
    }
    for (key, value) in entries {
        parts.push((vec![disposition_for(key)], field_text(key, value)?.into_bytes()));
    }

    let boundary = if *fields == meta.original_fields && !meta.boundary.is_empty() {
        meta.boundary.clone()
    } else {
        fresh_boundary(&parts)
    };
    let mut out = Vec::new();
    for (headers, content) in &parts {
        out.extend_from_slice(b"--");
        out.extend_from_slice(boundary.as_bytes());
        out.extend_from_slice(b"\r\n");
        for (k, v) in headers {
            out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(content);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"--");
    out.extend_from_slice(boundary.as_bytes());
    out.extend_from_slice(b"--\r\n");
    Ok((out, boundary))
}

/// Deterministic boundary derived from the part contents, guaranteed not to
/// occur inside any part.
fn fresh_boundary(parts: &[RawPart]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in parts.iter().flat_map(|(_, c)| c.iter()) {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    loop {
        let candidate = format!("----anonproxy{hash:016x}");
        if !parts
            .iter()
            .any(|(_, c)| find(c, candidate.as_bytes(), 0).is_some())
        {
            return candidate;
        }
        hash = hash.wrapping_add(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BODY: &[u8] = b"--XyZ\r\n\
Content-Disposition: form-data; name=\"event\"\r\n\r\n\
MOBILE_APP_INSTALL\r\n\
--XyZ\r\n\
Content-Disposition: form-data; name=\"upload\"; filename=\"a.bin\"\r\n\
Content-Type: application/octet-stream\r\n\r\n\
\x00\x01\x02\r\n\
--XyZ\r\n\
Content-Disposition: form-data; name=\"advertiser_id\"\r\n\r\n\
8e83d747-13ec\r\n\
--XyZ--\r\n";

    #[test]
    fn decodes_fields_and_keeps_files() {
        let (fields, meta) = decode("XyZ", BODY).unwrap();
        assert_eq!(
            fields,
            Attributes::new()
                .with("event", "MOBILE_APP_INSTALL")
                .with("advertiser_id", "8e83d747-13ec")
        );
        assert_eq!(meta.parts.len(), 3);
        assert_eq!(meta.parts[1].kind, PartKind::Raw(vec![0, 1, 2]));
    }

    #[test]
    fn unchanged_fields_reproduce_the_body() {
        let (fields, meta) = decode("XyZ", BODY).unwrap();
        let (out, boundary) = encode(&fields, &meta).unwrap();
        assert_eq!(boundary, "XyZ");
        assert_eq!(out, BODY);
    }

    #[test]
    fn changed_fields_get_a_new_boundary() {
        let (mut fields, meta) = decode("XyZ", BODY).unwrap();
        *fields.get_mut("advertiser_id").unwrap() = "8e83d7*******".into();
        let (out, boundary) = encode(&fields, &meta).unwrap();
        assert_ne!(boundary, "XyZ");
        let (again, meta2) = decode(&boundary, &out).unwrap();
        assert_eq!(again, fields);
        assert_eq!(meta2.parts[1].kind, PartKind::Raw(vec![0, 1, 2]));
    }

    #[test]
    fn nested_values_are_rejected() {
        let (_, meta) = decode("XyZ", BODY).unwrap();
        let fields = Attributes::new().with("event", Attributes::new().with("a", "b"));
        assert!(matches!(encode(&fields, &meta), Err(Error::Encode(_))));
    }

    #[test]
    fn header_params() {
        let v = r#"form-data; name="a \"b\""; filename=x.txt"#;
        assert_eq!(header_param(v, "name").as_deref(), Some("a \"b\""));
        assert_eq!(header_param(v, "filename").as_deref(), Some("x.txt"));
        assert_eq!(header_param(v, "missing"), None);
    }

    #[test]
    fn truncated_body_is_rejected() {
        assert!(decode("XyZ", &BODY[..40]).is_err());
        assert!(decode("nope", BODY).is_err());
    }
}
