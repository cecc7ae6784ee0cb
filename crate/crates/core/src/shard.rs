//! Reinforced shard files.
//!
//! A shard is one framed file (see [`crate::container`]) with magic `DRSH`. The
//! metadata is a JSON [`ShardHeader`]; the body is `record_count` fixed-size
//! records laid out back to back, all little-endian:
//!
//! ```text
//! sample_id        u64
//! image            image_side² × f32
//! gt caption       caption_dim × f32
//! syn captions     N × caption_dim × f32
//! augmentations    A × 21-byte AugmentationParams
//! for each teacher k, in header order:
//!     image embs   A × d_k × bf16
//!     text embs    (1 + N) × d_k × bf16     (gt caption first)
//! ```
//!
//! so that
//!
//! ```text
//! bytes_per_record = 8 + 4·s² + 4·c·(1 + N) + 21·A + Σ_k 2·d_k·(A + 1 + N)
//! ```

use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationParams, WIRE_SIZE};
use crate::container::{self, hex64};
use crate::error::{Error, Result};
use crate::seed::{self, Hasher64};
use crate::tensor::{bf16_bits_to_f32, Bf16Buffer, LogitScale};

pub const SHARD_MAGIC: [u8; 4] = *b"DRSH";
/// Allowed deviation of a decoded embedding's norm from 1.
pub const NORM_SLACK: f64 = 1.0 / 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSlot {
    pub teacher_id: String,
    pub d_k: usize,
    pub logit_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub shard_id: u64,
    pub record_count: u64,
    pub image_side: usize,
    pub caption_dim: usize,
    #[serde(rename = "A")]
    pub num_augs: usize,
    #[serde(rename = "N")]
    pub num_captions: usize,
    pub teachers: Vec<TeacherSlot>,
    #[serde(with = "hex64")]
    pub world_fingerprint: u64,
}

impl ShardHeader {
    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Config("shard needs at least one teacher".into()));
        }
        if self.num_augs == 0 {
            return Err(Error::Config("A must be >= 1".into()));
        }
        if self.image_side == 0 || self.image_side > u16::MAX as usize || self.caption_dim == 0 {
            return Err(Error::Config("image_side and caption_dim must be positive".into()));
        }
        for t in &self.teachers {
            if t.d_k == 0 {
                return Err(Error::Config(format!("teacher {} has d_k = 0", t.teacher_id)));
            }
            LogitScale::new(t.logit_scale)?;
        }
        Ok(())
    }

    /// Size of one record in bytes; see the module docs for the formula.
    pub fn record_size(&self) -> usize {
        let (s, c, a, n) = (self.image_side, self.caption_dim, self.num_augs, self.num_captions);
        let teachers: usize = self.teachers.iter().map(|t| 2 * t.d_k * (a + 1 + n)).sum();
        8 + 4 * s * s + 4 * c * (1 + n) + WIRE_SIZE * a + teachers
    }

    fn body_len(&self) -> Result<usize> {
        usize::try_from(self.record_count)
            .ok()
            .and_then(|n| n.checked_mul(self.record_size()))
            .ok_or_else(|| Error::Corrupt("record_count overflows".into()))
    }
}

/// Stored embeddings from one teacher for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherReinforcement {
    /// One per stored augmentation.
    pub image: Vec<Vec<f32>>,
    /// Ground-truth caption first, then the synthetic captions.
    pub text: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReinforcedRecord {
    pub sample_id: u64,
    pub image: Vec<f32>,
    pub gt_caption: Vec<f32>,
    pub syn_captions: Vec<Vec<f32>>,
    pub augmentations: Vec<AugmentationParams>,
    pub teachers: Vec<TeacherReinforcement>,
}

fn record_err(index: usize, reason: impl Into<String>) -> Error {
    Error::Record {
        index,
        reason: reason.into(),
    }
}

fn put_f32s(out: &mut Vec<u8>, index: usize, what: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(record_err(index, format!("{what} has {} values, header says {len}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(record_err(index, format!("{what} is not finite")));
    }
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn check_unit(index: usize, what: &str, v: &[f32]) -> Result<()> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_SLACK {
        return Err(record_err(index, format!("{what} has norm {n}")));
    }
    Ok(())
}

fn put_embedding(out: &mut Vec<u8>, index: usize, what: &str, v: &[f32], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(record_err(index, format!("{what} has dim {}, header says {d}", v.len())));
    }
    let buf = Bf16Buffer::encode(v.iter().map(|&x| x as f64)).map_err(|e| record_err(index, format!("{what}: {e}")))?;
    check_unit(index, what, &buf.decode())?;
    for b in buf.bits() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(())
}

fn encode_record(header: &ShardHeader, index: usize, r: &ReinforcedRecord, out: &mut Vec<u8>) -> Result<()> {
    let (s, c) = (header.image_side, header.caption_dim);
    out.extend_from_slice(&r.sample_id.to_le_bytes());
    put_f32s(out, index, "image", &r.image, s * s)?;
    put_f32s(out, index, "gt caption", &r.gt_caption, c)?;
    if r.syn_captions.len() != header.num_captions {
        return Err(record_err(index, format!("{} synthetic captions, header says {}", r.syn_captions.len(), header.num_captions)));
    }
    for cap in &r.syn_captions {
        put_f32s(out, index, "synthetic caption", cap, c)?;
    }
    if r.augmentations.len() != header.num_augs {
        return Err(record_err(index, format!("{} augmentations, header says {}", r.augmentations.len(), header.num_augs)));
    }
    for aug in &r.augmentations {
        aug.validate(s).map_err(|e| record_err(index, e.to_string()))?;
        aug.encode(out);
    }
    if r.teachers.len() != header.teachers.len() {
        return Err(record_err(index, format!("{} teacher blocks, header says {}", r.teachers.len(), header.teachers.len())));
    }
    for (slot, t) in header.teachers.iter().zip(&r.teachers) {
        if t.image.len() != header.num_augs || t.text.len() != 1 + header.num_captions {
            return Err(record_err(index, format!("teacher {} embedding count mismatch", slot.teacher_id)));
        }
        for e in &t.image {
            put_embedding(out, index, "image embedding", e, slot.d_k)?;
        }
        for e in &t.text {
            put_embedding(out, index, "text embedding", e, slot.d_k)?;
        }
    }
    Ok(())
}

/// Serializes a complete shard file in memory.
pub fn encode_shard(header: &ShardHeader, records: &[ReinforcedRecord]) -> Result<Vec<u8>> {
    header.validate()?;
    if header.record_count != records.len() as u64 {
        return Err(Error::Precondition(format!(
            "header record_count {} but {} records given",
            header.record_count,
            records.len()
        )));
    }
    let size = header.record_size();
    let mut body = Vec::with_capacity(size * records.len());
    for (i, r) in records.iter().enumerate() {
        encode_record(header, i, r, &mut body)?;
        debug_assert_eq!(body.len(), size * (i + 1));
    }
    let meta = serde_json::to_vec(header)?;
    Ok(container::encode(SHARD_MAGIC, &meta, &body))
}

/// Atomically writes a shard and returns its content hash (see [`file_hash`]).
pub fn write_shard(path: &Path, header: &ShardHeader, records: &[ReinforcedRecord]) -> Result<u64> {
    let bytes = encode_shard(header, records)?;
    container::write_atomic(path, &bytes)?;
    Ok(seed::hash64(&bytes))
}

fn parse_header(meta: &[u8]) -> Result<ShardHeader> {
    let header: ShardHeader =
        serde_json::from_slice(meta).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    header.validate().map_err(|e| Error::Corrupt(format!("invalid header: {e}")))?;
    Ok(header)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn bf16s(&mut self, n: usize) -> Vec<f32> {
        self.take(2 * n)
            .chunks_exact(2)
            .map(|c| bf16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect()
    }
}

fn decode_record(header: &ShardHeader, index: usize, bytes: &[u8]) -> Result<ReinforcedRecord> {
    let (s, c, a, n) = (header.image_side, header.caption_dim, header.num_augs, header.num_captions);
    let mut cur = Cursor { bytes, pos: 0 };
    let sample_id = u64::from_le_bytes(cur.take(8).try_into().unwrap());
    let image = cur.f32s(s * s);
    let gt_caption = cur.f32s(c);
    let syn_captions: Vec<Vec<f32>> = (0..n).map(|_| cur.f32s(c)).collect();
    let augmentations = (0..a)
        .map(|_| {
            let p = AugmentationParams::decode(cur.take(WIRE_SIZE)).map_err(|e| record_err(index, e.to_string()))?;
            p.validate(s).map_err(|e| record_err(index, e.to_string()))?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let teachers = header
        .teachers
        .iter()
        .map(|slot| TeacherReinforcement {
            image: (0..a).map(|_| cur.bf16s(slot.d_k)).collect(),
            text: (0..1 + n).map(|_| cur.bf16s(slot.d_k)).collect(),
        })
        .collect::<Vec<_>>();
    let raw_ok = image.iter().chain(&gt_caption).chain(syn_captions.iter().flatten()).all(|x| x.is_finite());
    if !raw_ok {
        return Err(record_err(index, "non-finite raw payload"));
    }
    for t in &teachers {
        for e in t.image.iter().chain(&t.text) {
            check_unit(index, "stored embedding", e)?;
        }
    }
    Ok(ReinforcedRecord {
        sample_id,
        image,
        gt_caption,
        syn_captions,
        augmentations,
        teachers,
    })
}

/// A validated shard held in memory. Records decode lazily, in stored order.
pub struct ShardReader {
    header: ShardHeader,
    bytes: Vec<u8>,
    body_offset: usize,
}

impl ShardReader {
    /// Validates magic, version, header, length, and CRC.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let frame = container::decode_header(&bytes, SHARD_MAGIC)?;
        let header = parse_header(frame.meta)?;
        container::verify_body(&bytes, &frame, header.body_len()?)?;
        let body_offset = frame.body_offset;
        Ok(Self {
            header,
            bytes,
            body_offset,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn content_hash(&self) -> u64 {
        seed::hash64(&self.bytes)
    }

    /// O(1) random access.
    pub fn record(&self, index: usize) -> Result<ReinforcedRecord> {
        if index >= self.len() {
            return Err(Error::Precondition(format!("record {index} of {}", self.len())));
        }
        let size = self.header.record_size();
        let start = self.body_offset + index * size;
        decode_record(&self.header, index, &self.bytes[start..start + size])
    }

    pub fn records(&self) -> impl Iterator<Item = Result<ReinforcedRecord>> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Decodes every record, failing on the first bad one.
    pub fn read_all(&self) -> Result<Vec<ReinforcedRecord>> {
        self.records().collect()
    }
}

pub fn read_shard(path: &Path) -> Result<ShardReader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ShardReader::from_bytes(bytes)
}

/// Content hash of a file on disk: the same value `write_shard` returns.
pub fn file_hash(path: &Path) -> Result<u64> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Hasher64::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(h.finish());
        }
        h.update(&buf[..n]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardSummary {
    pub header: ShardHeader,
    pub file_size: u64,
    pub bytes_per_record: usize,
    pub content_hash: u64,
}

impl fmt::Display for ShardSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "shard_id          {}", h.shard_id)?;
        writeln!(f, "records           {}", h.record_count)?;
        writeln!(f, "image_side        {}", h.image_side)?;
        writeln!(f, "caption_dim       {}", h.caption_dim)?;
        writeln!(f, "A                 {}", h.num_augs)?;
        writeln!(f, "N                 {}", h.num_captions)?;
        writeln!(f, "K                 {}", h.teachers.len())?;
        for t in &h.teachers {
            writeln!(f, "  teacher {:<10} d_k={} logit_scale={}", t.teacher_id, t.d_k, t.logit_scale)?;
        }
        writeln!(f, "world_fingerprint {:016x}", h.world_fingerprint)?;
        writeln!(f, "file_size         {}", self.file_size)?;
        writeln!(f, "bytes_per_record  {}", self.bytes_per_record)?;
        write!(f, "content_hash      {:016x}", self.content_hash)
    }
}

/// Validates a shard by streaming it; record payloads are never decoded.
pub fn inspect(path: &Path) -> Result<ShardSummary> {
    let io = |e| Error::io(path, e);
    let mut f = File::open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len() as usize;

    let mut prefix = Vec::with_capacity(10);
    (&mut f).take(10).read_to_end(&mut prefix).map_err(io)?;
    if prefix.len() == 10 {
        let meta_len = u32::from_le_bytes(prefix[6..10].try_into().unwrap()) as u64;
        (&mut f).take(meta_len).read_to_end(&mut prefix).map_err(io)?;
    }
    let frame = container::decode_header(&prefix, SHARD_MAGIC)?;
    let header = parse_header(frame.meta)?;
    let body_offset = frame.body_offset;

    let mut tail = None;
    if len >= 4 {
        let mut t = [0u8; 4];
        f.seek(SeekFrom::Start(len as u64 - 4)).map_err(io)?;
        f.read_exact(&mut t).map_err(io)?;
        tail = Some(t);
    }
    let body_end = container::check_length(len, tail, body_offset, header.body_len()?)?;

    f.seek(SeekFrom::Start(0)).map_err(io)?;
    let mut crc = crc32fast::Hasher::new();
    let mut hash = Hasher64::default();
    let mut buf = vec![0u8; 1 << 16];
    let mut pos = 0usize;
    let mut trailer = Vec::with_capacity(container::TRAILER_LEN);
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        let chunk = &buf[..n];
        hash.update(chunk);
        let lo = pos.max(4);
        let hi = (pos + n).min(body_end);
        if lo < hi {
            crc.update(&chunk[lo - pos..hi - pos]);
        }
        if pos + n > body_end {
            let from = body_end.max(pos);
            trailer.extend_from_slice(&chunk[from - pos..]);
        }
        pos += n;
    }
    let stored = u32::from_le_bytes(trailer[..4].try_into().unwrap());
    container::check_crc(stored, crc.finalize())?;
    Ok(ShardSummary {
        bytes_per_record: header.record_size(),
        header,
        file_size: len as u64,
        content_hash: hash.finish(),
    })
}
