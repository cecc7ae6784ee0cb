//! Framing shared by shard files and model checkpoints.
//!
//! ```text
//! magic      4 bytes   ("DRSH" for shards, "DRMD" for models)
//! version    u16 LE    (= 1)
//! meta_len   u32 LE
//! meta       meta_len bytes of UTF-8 JSON
//! body       fixed size, derived from meta
//! crc32      u32 LE    CRC-32 (IEEE) of every byte after the leading magic up to the end of body
//! end magic  4 bytes   ("DREN")
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u16 = 1;
pub const END_MAGIC: [u8; 4] = *b"DREN";
pub const TRAILER_LEN: usize = 8;

pub fn encode(magic: [u8; 4], meta: &[u8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 4 + meta.len() + body.len() + TRAILER_LEN);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&END_MAGIC);
    out
}

#[derive(Debug)]
pub struct FrameHeader<'a> {
    pub version: u16,
    pub meta: &'a [u8],
    pub body_offset: usize,
}

/// Parses magic, version, and metadata. Does not look at the body.
pub fn decode_header<'a>(bytes: &'a [u8], magic: [u8; 4]) -> Result<FrameHeader<'a>> {
    let len = bytes.len();
    let prefix = len.min(4);
    if bytes[..prefix] != magic[..prefix] {
        return Err(Error::NotAShard(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..prefix]),
            String::from_utf8_lossy(&magic)
        )));
    }
    if len < 10 {
        return Err(Error::Truncated { offset: len as u64 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body_offset = 10usize.saturating_add(meta_len);
    if len < body_offset {
        return Err(Error::Truncated { offset: len as u64 });
    }
    Ok(FrameHeader {
        version,
        meta: &bytes[10..body_offset],
        body_offset,
    })
}

/// Checks total file length and the trailing magic; returns the end of the body.
pub fn check_length(len: usize, tail: Option<[u8; 4]>, body_offset: usize, body_len: usize) -> Result<usize> {
    let expected = body_offset
        .checked_add(body_len)
        .and_then(|v| v.checked_add(TRAILER_LEN))
        .ok_or_else(|| Error::Corrupt("declared size overflows".into()))?;
    let ends_with_magic = tail == Some(END_MAGIC);
    if len < expected && !ends_with_magic {
        return Err(Error::Truncated { offset: len as u64 });
    }
    if len != expected {
        return Err(Error::Corrupt(format!("file is {len} bytes, header implies {expected}")));
    }
    if !ends_with_magic {
        return Err(Error::Corrupt("bad end magic".into()));
    }
    Ok(body_offset + body_len)
}

pub fn check_crc(stored: u32, actual: u32) -> Result<()> {
    if stored != actual {
        return Err(Error::Corrupt(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(())
}

/// Checks total length, trailer magic, and CRC; returns the body slice.
pub fn verify_body<'a>(bytes: &'a [u8], header: &FrameHeader<'_>, body_len: usize) -> Result<&'a [u8]> {
    let len = bytes.len();
    let tail = (len >= 4).then(|| bytes[len - 4..].try_into().unwrap());
    let body_end = check_length(len, tail, header.body_offset, body_len)?;
    let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
    check_crc(stored, crc32fast::hash(&bytes[4..body_end]))?;
    Ok(&bytes[header.body_offset..body_end])
}

/// Serde adapters writing 64-bit hashes as 16-digit lowercase hex strings.
pub mod hex64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(D::Error::custom)
    }

    pub mod option {
        use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.serialize_str(&format!("{v:016x}")),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| u64::from_str_radix(&s, 16).map_err(D::Error::custom))
                .transpose()
        }
    }
}

/// Write to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
