//! Lossless sparse encoding of radar tensors (`M4SP`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0   magic "M4SP"
//! 4   version u16 (= 1)
//! 6   reserved u16 (= 0)
//! 8   dims nx, ny, nz: 3 x u16
//! 14  reserved u16 (= 0)
//! 16  origin: 3 x f32
//! 28  pitch: 3 x f32
//! 40  record count u32
//! 44  CRC-32 of the record bytes u32
//! 48  reserved, 16 zero bytes
//! 64  records: count x (i u16, j u16, k u16, intensity f32), strictly
//!     increasing linear index, intensity != 0
//! ```

use thiserror::Error;

use crate::geometry::Vec3;
use crate::tensor::{GridGeometry, RadarTensor, TensorError};

pub const MAGIC: &[u8; 4] = b"M4SP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const RECORD_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("tensor dims {0:?} do not fit u16 indices")]
    UnsupportedDimension([usize; 3]),
    #[error("corrupt sparse stream at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}

fn corrupt(offset: usize, reason: impl Into<String>) -> CodecError {
    CodecError::Corrupt { offset, reason: reason.into() }
}

/// One nonzero voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseRecord {
    pub idx: [u16; 3],
    pub intensity: f32,
}

/// Header fields of an encoded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedHeader {
    pub geometry: GridGeometry,
    pub record_count: u32,
    pub checksum: u32,
}

pub fn encode(t: &RadarTensor) -> Result<Vec<u8>, CodecError> {
    let g = t.geometry();
    let dims = g.dims();
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(CodecError::UnsupportedDimension(dims));
    }
    let nonzero = t.nonzero_count();
    let mut out = vec![0u8; HEADER_LEN];
    out.reserve(nonzero * RECORD_LEN);
    for (lin, &v) in t.values().iter().enumerate() {
        if v != 0.0 {
            let [i, j, k] = g.unravel(lin);
            out.extend_from_slice(&(i as u16).to_le_bytes());
            out.extend_from_slice(&(j as u16).to_le_bytes());
            out.extend_from_slice(&(k as u16).to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32fast::hash(&out[HEADER_LEN..]);
    out[0..4].copy_from_slice(MAGIC);
    out[4..6].copy_from_slice(&VERSION.to_le_bytes());
    for (n, d) in dims.iter().enumerate() {
        out[8 + 2 * n..10 + 2 * n].copy_from_slice(&(*d as u16).to_le_bytes());
    }
    let (o, p) = (g.origin(), g.pitch());
    for n in 0..3 {
        out[16 + 4 * n..20 + 4 * n].copy_from_slice(&(o[n] as f32).to_le_bytes());
        out[28 + 4 * n..32 + 4 * n].copy_from_slice(&(p[n] as f32).to_le_bytes());
    }
    out[40..44].copy_from_slice(&(nonzero as u32).to_le_bytes());
    out[44..48].copy_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<EncodedHeader, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let version = u16_at(4);
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let dims = [u16_at(8) as usize, u16_at(10) as usize, u16_at(12) as usize];
    let origin = Vec3::new(f32_at(16), f32_at(20), f32_at(24));
    let pitch = Vec3::new(f32_at(28), f32_at(32), f32_at(36));
    let geometry = GridGeometry::new(dims, origin, pitch).map_err(|e: TensorError| corrupt(8, e.to_string()))?;
    Ok(EncodedHeader { geometry, record_count: u32_at(40), checksum: u32_at(44) })
}

/// Validates a stream and returns its records without densifying.
pub fn decode_records(bytes: &[u8]) -> Result<(EncodedHeader, Vec<SparseRecord>), CodecError> {
    let header = decode_header(bytes)?;
    let count = header.record_count as usize;
    let expected = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() != expected {
        return Err(corrupt(
            bytes.len().min(expected),
            format!("stream length {} does not match {count} records ({expected} bytes)", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let actual = crc32fast::hash(payload);
    if actual != header.checksum {
        return Err(corrupt(44, format!("checksum mismatch: header {:#010x}, payload {actual:#010x}", header.checksum)));
    }
    let g = header.geometry;
    let dims = g.dims();
    let mut records = Vec::with_capacity(count);
    let mut previous: Option<usize> = None;
    for (n, rec) in payload.chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + n * RECORD_LEN;
        let idx = [
            u16::from_le_bytes([rec[0], rec[1]]),
            u16::from_le_bytes([rec[2], rec[3]]),
            u16::from_le_bytes([rec[4], rec[5]]),
        ];
        let intensity = f32::from_le_bytes(rec[6..10].try_into().unwrap());
        if (0..3).any(|a| idx[a] as usize >= dims[a]) {
            return Err(corrupt(offset, format!("index {idx:?} outside dims {dims:?}")));
        }
        if !(intensity.is_finite() && intensity > 0.0) {
            return Err(corrupt(offset + 6, format!("invalid intensity {intensity}")));
        }
        let lin = g.linear_index(idx[0] as usize, idx[1] as usize, idx[2] as usize);
        if previous.is_some_and(|p| lin <= p) {
            return Err(corrupt(offset, "records not strictly increasing in linear index"));
        }
        previous = Some(lin);
        records.push(SparseRecord { idx, intensity });
    }
    Ok((header, records))
}

pub fn decode(bytes: &[u8]) -> Result<RadarTensor, CodecError> {
    let (header, records) = decode_records(bytes)?;
    let g = header.geometry;
    let mut values = vec![0.0f32; g.len()];
    for r in records {
        values[g.linear_index(r.idx[0] as usize, r.idx[1] as usize, r.idx[2] as usize)] = r.intensity;
    }
    RadarTensor::new(g, values).map_err(|e| corrupt(HEADER_LEN, e.to_string()))
}

/// Encoded size in bytes without materialising the stream.
pub fn encoded_len(t: &RadarTensor) -> usize {
    HEADER_LEN + RECORD_LEN * t.nonzero_count()
}

/// Dense `f32` byte size divided by encoded byte size.
pub fn compression_ratio(t: &RadarTensor) -> f64 {
    (t.geometry().len() * 4) as f64 / encoded_len(t) as f64
}
