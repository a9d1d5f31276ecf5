//! The `.nvqg` container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NVQG"
//!      4     2  version = 1
//!      6     2  flags: bit 0 has_sh, bits 1-2 sh degree
//!      8     8  splat count N
//!     16  4 x 7 group records s, r, c, sh: dim u16, bits u8, entries u32
//!     44        codebooks, row-major f32, group order
//!               N records of x, y, z, opacity logit as f32
//!               four index streams, LSB-first, each padded to a byte
//! ```
//!
//! All integers and floats are little-endian.

mod bits;

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::compress::{Group, QuantizedCloud};
use crate::splat::PARAMS_PER_SPLAT;
use crate::vq::Codebook;

pub use bits::{stream_len, BitReader, BitWriter};

pub const MAGIC: [u8; 4] = *b"NVQG";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 16 + 4 * 7;
/// Bytes of position plus opacity per splat.
pub const RAW_BYTES_PER_SPLAT: u64 = 16;
const FLAG_HAS_SH: u16 = 1;
const FLAG_DEGREE_SHIFT: u16 = 1;
const KNOWN_FLAGS: u16 = 0b111;
const MAX_BITS: u8 = 31;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {found:02x?} at byte 0")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {version} at byte 4")]
    UnsupportedVersion { version: u16 },
    #[error("invalid flags {flags:#06x} at byte 6")]
    BadFlags { flags: u16 },
    #[error("invalid {group} group record at byte {offset}: {reason}")]
    BadGroupRecord { group: Group, offset: u64, reason: String },
    #[error("truncated {section} at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("{group} codebook entry {entry} at byte {offset} is not finite")]
    NonFiniteCodebook { group: Group, entry: usize, offset: u64 },
    #[error("{group} index {index} of splat {splat} at byte {offset} exceeds {entries} entries")]
    IndexOutOfRange {
        group: Group,
        splat: u64,
        index: u32,
        entries: u32,
        offset: u64,
    },
    #[error("nonzero padding bits in the {group} index stream at byte {offset}")]
    NonZeroPadding { group: Group, offset: u64 },
    #[error("{extra} trailing bytes after the last index stream at byte {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
}

/// The fixed-size file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressedFileHeader {
    pub version: u16,
    pub flags: u16,
    pub splat_count: u64,
    /// `(dim, bits, entries)` per group.
    pub groups: [(u16, u8, u32); 4],
}

impl CompressedFileHeader {
    pub fn for_cloud(q: &QuantizedCloud) -> Self {
        let deg = q.sh_degree();
        let flags = (u16::from(deg > 0) * FLAG_HAS_SH) | (u16::from(deg) << FLAG_DEGREE_SHIFT);
        let groups = Group::ALL.map(|g| {
            let cb = q.codebook(g);
            (g.dim() as u16, q.bits()[g.index()] as u8, cb.entries() as u32)
        });
        Self {
            version: VERSION,
            flags,
            splat_count: q.len() as u64,
            groups,
        }
    }

    pub fn sh_degree(&self) -> u8 {
        ((self.flags >> FLAG_DEGREE_SHIFT) & 0b11) as u8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.splat_count.to_le_bytes());
        for (dim, bits, entries) in self.groups {
            out.extend_from_slice(&dim.to_le_bytes());
            out.push(bits);
            out.extend_from_slice(&entries.to_le_bytes());
        }
        out
    }

    /// Parse and validate the first [`HEADER_BYTES`] bytes.
    pub fn parse(data: &[u8]) -> Result<Self, CodecError> {
        let avail = data.len() as u64;
        if avail < 4 || data[..4] != MAGIC {
            if avail < 4 && MAGIC.starts_with(data) {
                return Err(truncated("header", 0, HEADER_BYTES, avail));
            }
            return Err(CodecError::BadMagic {
                found: data[..data.len().min(4)].to_vec(),
            });
        }
        if avail < HEADER_BYTES {
            return Err(truncated("header", 0, HEADER_BYTES, avail));
        }
        let u16_at = |o: usize| u16::from_le_bytes([data[o], data[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(data[o..o + 4].try_into().expect("4 bytes"));
        let version = u16_at(4);
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion { version });
        }
        let flags = u16_at(6);
        let degree = (flags >> FLAG_DEGREE_SHIFT) & 0b11;
        if flags & !KNOWN_FLAGS != 0 || (flags & FLAG_HAS_SH != 0) != (degree > 0) {
            return Err(CodecError::BadFlags { flags });
        }
        let splat_count = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes"));
        let mut groups = [(0u16, 0u8, 0u32); 4];
        for g in Group::ALL {
            let o = 16 + 7 * g.index();
            let rec = (u16_at(o), data[o + 2], u32_at(o + 3));
            let bad = |reason: String| CodecError::BadGroupRecord {
                group: g,
                offset: o as u64,
                reason,
            };
            let (dim, bits, entries) = rec;
            if usize::from(dim) != g.dim() {
                return Err(bad(format!("dim {dim}, expected {}", g.dim())));
            }
            if bits > MAX_BITS {
                return Err(bad(format!("{bits} bits exceeds {MAX_BITS}")));
            }
            if u64::from(entries) != 1u64 << bits {
                return Err(bad(format!("{entries} entries but {bits} bits")));
            }
            groups[g.index()] = rec;
        }
        Ok(Self {
            version,
            flags,
            splat_count,
            groups,
        })
    }

    /// Section sizes implied by the header, or `None` on overflow.
    fn layout(&self) -> Option<(u64, u64, [u64; 4])> {
        let mut codebooks = 0u64;
        for (dim, _, entries) in self.groups {
            codebooks = codebooks.checked_add(u64::from(entries).checked_mul(u64::from(dim))?.checked_mul(4)?)?;
        }
        let raw = self.splat_count.checked_mul(RAW_BYTES_PER_SPLAT)?;
        let mut streams = [0u64; 4];
        for (s, (_, bits, _)) in streams.iter_mut().zip(self.groups) {
            *s = self.splat_count.checked_mul(u64::from(bits))?.div_ceil(8);
        }
        Some((codebooks, raw, streams))
    }
}

fn truncated(section: &'static str, offset: u64, needed: u64, available: u64) -> CodecError {
    CodecError::Truncated {
        section,
        offset,
        needed,
        available,
    }
}

/// Serialize to bytes.
pub fn encode_to_vec(q: &QuantizedCloud) -> Vec<u8> {
    let header = CompressedFileHeader::for_cloud(q);
    let report = size_report(q);
    let mut out = header.to_bytes();
    out.reserve(report.total as usize - out.len());
    for cb in q.codebooks() {
        for v in cb.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (p, o) in q.positions().iter().zip(q.opacities()) {
        for v in p.iter().chain(std::iter::once(o)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for g in Group::ALL {
        let bits = q.bits()[g.index()];
        let mut w = BitWriter::with_capacity(stream_len(q.len() as u64, bits) as usize);
        for &k in q.indices(g) {
            w.write(k, bits);
        }
        out.extend_from_slice(&w.finish());
    }
    debug_assert_eq!(out.len() as u64, report.total);
    out
}

/// Write to `path`; returns the number of bytes written.
pub fn encode(q: &QuantizedCloud, path: impl AsRef<Path>) -> Result<u64, CodecError> {
    let bytes = encode_to_vec(q);
    fs::write(path.as_ref(), &bytes).map_err(|source| CodecError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn decode(path: impl AsRef<Path>) -> Result<QuantizedCloud, CodecError> {
    let bytes = fs::read(path.as_ref()).map_err(|source| CodecError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    decode_bytes(&bytes)
}

/// Exact inverse of [`encode_to_vec`]. Never reads past a section's declared
/// length and rejects trailing data.
pub fn decode_bytes(data: &[u8]) -> Result<QuantizedCloud, CodecError> {
    let header = CompressedFileHeader::parse(data)?;
    let total = data.len() as u64;
    let (cb_bytes, raw_bytes, stream_bytes) = header
        .layout()
        .ok_or_else(|| truncated("codebooks", HEADER_BYTES, u64::MAX, total - HEADER_BYTES))?;

    let mut offset = HEADER_BYTES;
    let take = |offset: &mut u64, len: u64, section: &'static str| -> Result<&[u8], CodecError> {
        let available = total - *offset;
        if len > available {
            return Err(truncated(section, *offset, len, available));
        }
        let s = &data[*offset as usize..(*offset + len) as usize];
        *offset += len;
        Ok(s)
    };

    // size check up front so no section is decoded from a short file
    let needed = cb_bytes
        .checked_add(raw_bytes)
        .and_then(|v| stream_bytes.iter().try_fold(v, |a, &s| a.checked_add(s)));
    if needed.is_none_or(|n| n > total - HEADER_BYTES) {
        let mut probe = HEADER_BYTES;
        take(&mut probe, cb_bytes, "codebooks")?;
        take(&mut probe, raw_bytes, "splat records")?;
        for g in Group::ALL {
            take(&mut probe, stream_bytes[g.index()], stream_name(g))?;
        }
    }

    let mut codebooks = Vec::with_capacity(4);
    for g in Group::ALL {
        let (dim, _, entries) = header.groups[g.index()];
        let start = offset;
        let raw = take(&mut offset, u64::from(entries) * u64::from(dim) * 4, "codebooks")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteCodebook {
                group: g,
                entry: i / g.dim(),
                offset: start + 4 * i as u64,
            });
        }
        codebooks.push(Codebook::new(g.dim(), values).expect("dims and values checked"));
    }

    let n = header.splat_count as usize;
    let raw = take(&mut offset, raw_bytes, "splat records")?;
    let mut positions = Vec::with_capacity(n);
    let mut opacities = Vec::with_capacity(n);
    for rec in raw.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        positions.push([f(0), f(1), f(2)]);
        opacities.push(f(3));
    }

    let mut indices: [Vec<u32>; 4] = Default::default();
    for g in Group::ALL {
        let (_, bits, entries) = header.groups[g.index()];
        let start = offset;
        let stream = take(&mut offset, stream_bytes[g.index()], stream_name(g))?;
        let mut r = BitReader::new(stream);
        let idx = &mut indices[g.index()];
        idx.reserve(n);
        for splat in 0..n as u64 {
            let bit = r.bit_position() as u64;
            let k = r.read(u32::from(bits)).expect("stream length matches count");
            if k >= entries {
                return Err(CodecError::IndexOutOfRange {
                    group: g,
                    splat,
                    index: k,
                    entries,
                    offset: start + bit / 8,
                });
            }
            idx.push(k);
        }
        if !r.rest_is_zero() {
            return Err(CodecError::NonZeroPadding {
                group: g,
                offset: start + r.bit_position() as u64 / 8,
            });
        }
    }
    if offset != total {
        return Err(CodecError::TrailingBytes {
            offset,
            extra: total - offset,
        });
    }
    let codebooks: [Codebook; 4] = codebooks.try_into().expect("four groups");
    Ok(
        QuantizedCloud::new(positions, opacities, indices, codebooks, header.sh_degree())
            .expect("decoded fields satisfy every invariant"),
    )
}

fn stream_name(g: Group) -> &'static str {
    match g {
        Group::Scale => "s index stream",
        Group::Rotation => "r index stream",
        Group::Colour => "c index stream",
        Group::Sh => "sh index stream",
    }
}

/// Byte accounting of one encoded cloud.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub splats: u64,
    pub header: u64,
    pub codebooks: u64,
    /// Positions and opacities.
    pub raw_fields: u64,
    /// Index streams in group order.
    pub index_streams: [u64; 4],
    pub total: u64,
    /// `N × 59 × 4`: the same splats as uncompressed 32-bit floats.
    pub uncompressed: u64,
    /// `uncompressed / total`; 0 for an empty cloud.
    pub ratio: f64,
    pub index_bits: [u32; 4],
    /// Unpadded payload bits per splat: 128 raw plus the index widths.
    pub payload_bits_per_splat: u32,
    /// `59 × 32 / payload_bits_per_splat`, the large-N limit of `ratio`.
    pub payload_ratio: f64,
}

/// Closed-form sizes for `n` splats with the given entry counts.
pub fn size_for(n: u64, entries: [u32; 4]) -> SizeReport {
    let index_bits = entries.map(|e| crate::vq::index_bits(e as usize));
    let codebooks = Group::ALL
        .iter()
        .map(|g| u64::from(entries[g.index()]) * g.dim() as u64 * 4)
        .sum();
    let raw_fields = n * RAW_BYTES_PER_SPLAT;
    let index_streams = index_bits.map(|b| stream_len(n, b));
    let total = HEADER_BYTES + codebooks + raw_fields + index_streams.iter().sum::<u64>();
    let uncompressed = n * PARAMS_PER_SPLAT as u64 * 4;
    let payload_bits_per_splat = 128 + index_bits.iter().sum::<u32>();
    SizeReport {
        splats: n,
        header: HEADER_BYTES,
        codebooks,
        raw_fields,
        index_streams,
        total,
        uncompressed,
        ratio: if n == 0 {
            0.0
        } else {
            uncompressed as f64 / total as f64
        },
        index_bits,
        payload_bits_per_splat,
        payload_ratio: (PARAMS_PER_SPLAT * 32) as f64 / f64::from(payload_bits_per_splat),
    }
}

pub fn size_report(q: &QuantizedCloud) -> SizeReport {
    size_for(q.len() as u64, Group::ALL.map(|g| q.codebook(g).entries() as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    pub(crate) fn random_qcloud<R: Rng>(r: &mut R, n: usize) -> QuantizedCloud {
        let deg = r.random_range(0..=3u8);
        let bits: [u32; 4] = std::array::from_fn(|g| if g == 3 && deg == 0 { 0 } else { r.random_range(1..=6) });
        let codebooks = Group::ALL.map(|g| {
            let e = 1usize << bits[g.index()];
            Codebook::new(
                g.dim(),
                (0..e * g.dim()).map(|_| r.random_range(-5.0f32..5.0)).collect(),
            )
            .unwrap()
        });
        let indices = Group::ALL.map(|g| (0..n).map(|_| r.random_range(0..1u32 << bits[g.index()])).collect());
        QuantizedCloud::new(
            (0..n).map(|_| [r.random(), r.random(), r.random()]).collect(),
            (0..n).map(|_| r.random_range(-8.0..8.0)).collect(),
            indices,
            codebooks,
            deg,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_random() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..200 {
            let n = r.random_range(0..60);
            let q = random_qcloud(&mut r, n);
            let bytes = encode_to_vec(&q);
            assert_eq!(bytes.len() as u64, size_report(&q).total);
            let back = decode_bytes(&bytes).unwrap();
            assert_eq!(back, q);
            assert_eq!(encode_to_vec(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let mut r = rng::stream(2, &[]);
        let q = random_qcloud(&mut r, 5);
        let b = encode_to_vec(&q);
        assert_eq!(&b[..4], b"NVQG");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 5);
        assert_eq!(u16::from_le_bytes([b[16], b[17]]), 3);
        assert_eq!(u16::from_le_bytes([b[16 + 21], b[16 + 22]]), 45);
        assert_eq!(HEADER_BYTES, 44);
    }

    #[test]
    fn empty_cloud_is_header_plus_codebooks() {
        let cb = |g: Group| Codebook::zeros(2, g.dim()).unwrap();
        let q = QuantizedCloud::new(vec![], vec![], Default::default(), Group::ALL.map(cb), 1).unwrap();
        let b = encode_to_vec(&q);
        assert_eq!(b.len() as u64, 44 + 2 * (3 + 4 + 3 + 45) * 4);
        assert_eq!(decode_bytes(&b).unwrap(), q);
        assert_eq!(size_report(&q).ratio, 0.0);
    }

    #[test]
    fn one_splat_at_16k() {
        let s = size_for(1, [16384, 16384, 4096, 4096]);
        assert_eq!(s.index_bits, [14, 14, 12, 12]);
        assert_eq!(s.index_streams, [2, 2, 2, 2]);
        assert_eq!(s.raw_fields, 16);
        // a 10-bit index is 1.25 bytes before padding
        assert_eq!(stream_len(4, 10), 5);
    }

    #[test]
    fn hundred_thousand_at_16k() {
        let s = size_for(100_000, [16384, 16384, 4096, 4096]);
        assert_eq!(s.raw_fields, 1_600_000);
        assert_eq!(s.index_streams, [175_000, 175_000, 150_000, 150_000]);
        assert_eq!(s.codebooks, 1_245_184);
        assert_eq!(s.payload_bits_per_splat, 180);
        assert_eq!(s.total, 44 + 1_245_184 + 1_600_000 + 650_000);
        assert!((s.payload_ratio - 1888.0 / 180.0).abs() < 1e-12);
        assert_eq!(s.uncompressed, 23_600_000);
    }

    #[test]
    fn header_errors() {
        let mut r = rng::stream(3, &[]);
        let q = random_qcloud(&mut r, 8);
        let good = encode_to_vec(&q);

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_bytes(&b), Err(CodecError::BadMagic { .. })));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(
            decode_bytes(&b),
            Err(CodecError::UnsupportedVersion { version: 2 })
        ));
        let mut b = good.clone();
        b[6] |= 0x80;
        assert!(matches!(decode_bytes(&b), Err(CodecError::BadFlags { .. })));
        let mut b = good.clone();
        b[16] = 4;
        assert!(matches!(
            decode_bytes(&b),
            Err(CodecError::BadGroupRecord {
                group: Group::Scale,
                offset: 16,
                ..
            })
        ));
        let mut b = good.clone();
        b[16 + 7 + 2] += 1;
        assert!(matches!(
            decode_bytes(&b),
            Err(CodecError::BadGroupRecord {
                group: Group::Rotation,
                offset: 23,
                ..
            })
        ));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(
            decode_bytes(&b),
            Err(CodecError::TrailingBytes { extra: 1, .. })
        ));
    }

    #[test]
    fn nonzero_padding_rejected() {
        let cb = |g: Group| Codebook::zeros(8, g.dim()).unwrap();
        let q = QuantizedCloud::new(
            vec![[0.0; 3]],
            vec![0.0],
            [vec![1], vec![2], vec![3], vec![4]],
            Group::ALL.map(cb),
            3,
        )
        .unwrap();
        let mut b = encode_to_vec(&q);
        let last = b.len() - 1;
        b[last] |= 0x80;
        assert!(matches!(
            decode_bytes(&b),
            Err(CodecError::NonZeroPadding { group: Group::Sh, .. })
        ));
    }

    #[test]
    fn every_truncation_rejected() {
        let mut r = rng::stream(4, &[]);
        let q = random_qcloud(&mut r, 13);
        let good = encode_to_vec(&q);
        for len in 0..good.len() {
            match decode_bytes(&good[..len]) {
                Err(CodecError::Truncated { available, offset, .. }) => {
                    assert!(offset + available <= len as u64);
                }
                other => panic!("length {len}: {other:?}"),
            }
        }
    }

    #[test]
    fn huge_declared_count_is_truncation() {
        let mut r = rng::stream(5, &[]);
        let q = random_qcloud(&mut r, 2);
        let mut b = encode_to_vec(&q);
        b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_bytes(&b), Err(CodecError::Truncated { .. })));
    }
}
