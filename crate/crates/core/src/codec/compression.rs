use std::io::{Read, Write};

use flate2::read::{DeflateDecoder, GzDecoder, ZlibDecoder};
use flate2::write::{GzEncoder, ZlibEncoder};
use flate2::Compression;

use super::ContentEncoding;
use crate::error::{Error, Result};

pub fn decompress(encoding: ContentEncoding, data: &[u8]) -> Result<Vec<u8>> {
    match encoding {
        ContentEncoding::Identity => Ok(data.to_vec()),
        ContentEncoding::Gzip => read_all(GzDecoder::new(data), "gzip"),
        ContentEncoding::Deflate => {
            // Servers disagree on whether "deflate" means zlib-wrapped or raw.
            if looks_like_zlib(data) {
                if let Ok(out) = read_all(ZlibDecoder::new(data), "deflate") {
                    return Ok(out);
                }
            }
            read_all(DeflateDecoder::new(data), "deflate")
        }
    }
}

/// Compresses `data`. Deflate output is zlib-wrapped.
pub fn compress(encoding: ContentEncoding, data: &[u8]) -> Result<Vec<u8>> {
    let io = |e: std::io::Error| Error::Encode(format!("{encoding:?} compression failed: {e}"));
    match encoding {
        ContentEncoding::Identity => Ok(data.to_vec()),
        ContentEncoding::Gzip => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(data).map_err(io)?;
            enc.finish().map_err(io)
        }
        ContentEncoding::Deflate => {
            let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
            enc.write_all(data).map_err(io)?;
            enc.finish().map_err(io)
        }
    }
}

fn looks_like_zlib(data: &[u8]) -> bool {
    match data {
        [cmf, flg, ..] => cmf & 0x0f == 8 && (u16::from(*cmf) << 8 | u16::from(*flg)) % 31 == 0,
        _ => false,
    }
}

fn read_all(mut r: impl Read, what: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.read_to_end(&mut out)
        .map_err(|e| Error::Decode(format!("corrupt {what} stream: {e}")))?;
    Ok(out)
}
