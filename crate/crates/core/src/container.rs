//! Binary container for compressed models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"ALC1"
//! version u16            (1)
//! hlen    u32            length of the header in bytes
//! header  hlen bytes     JSON: segment map, groups, schemes, bit widths,
//!                        per-part sizes, payload bit length
//! payload ⌈bits/8⌉ bytes LSB-first bit stream, zero padded
//! ```
//!
//! The payload holds, for every group and then every part in scheme order:
//!
//! - quantization: K codebook entries as f32, then one ⌈log₂K⌉-bit index per
//!   group entry;
//! - sparse correction: one pair per stored delta, a p-bit delta followed by
//!   an f16 value. Dummy pairs carry the value bits `0x0000`; real values
//!   whose f16 rounding is ±0 are stored as the smallest subnormal of the same
//!   sign;
//! - low rank: U then V, row-major, f16.
//!
//! After the groups come all uncovered parameters in store order as f32. The
//! payload bit length therefore equals the storage accounting of
//! [`bits_total`](crate::metrics::bits_total) exactly.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::combo::{AdditiveCombo, ComboSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    decode_sparse_indices, encode_sparse_indices, index_bits, IndexPair, StorageConfig,
};
use crate::schemes::{CompressedPart, LowRankFactors, Quantization, SparseCorrection};
use crate::weights::{Segment, WeightStore};

pub const MAGIC: &[u8; 4] = b"ALC1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum PartHeader {
    Absent,
    Quant {
        k: usize,
        adaptive: bool,
    },
    Sparse {
        pairs: usize,
        budget: usize,
    },
    LowRank {
        rank: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    layers: usize,
    store_len: usize,
    segments: Vec<Segment>,
    storage: StorageConfig,
    spec: ComboSpec,
    /// Indexed `[group][part]`.
    parts: Vec<Vec<PartHeader>>,
    payload_bits: u64,
}

#[derive(Debug, Default)]
struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn write(&mut self, value: u64, width: u32) {
        for i in 0..width {
            let byte = (self.bits / 8) as usize;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                self.bytes[byte] |= 1 << (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bits: u64,
}

impl BitReader<'_> {
    fn read(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for i in 0..width {
            let byte = (self.bits / 8) as usize;
            let b = *self
                .bytes
                .get(byte)
                .ok_or_else(|| Error::Format("payload ends early".into()))?;
            if (b >> (self.bits % 8)) & 1 == 1 {
                v |= 1 << i;
            }
            self.bits += 1;
        }
        Ok(v)
    }
}

fn f16_bits(v: f64) -> u16 {
    f16::from_f64(v.clamp(-f16::MAX.to_f64(), f16::MAX.to_f64())).to_bits()
}

fn sparse_value_bits(v: f64) -> u16 {
    let b = f16_bits(v);
    if b & 0x7fff == 0 {
        (b & 0x8000) | 1
    } else {
        b
    }
}

fn from_f16(bits: u64) -> f64 {
    f16::from_bits(bits as u16).to_f64()
}

fn check_widths(cfg: &StorageConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.reference_bits != 32 || cfg.codebook_bits != 32 || cfg.value_bits != 16 {
        return Err(Error::Format(
            "the container stores f32 parameters and codebooks and f16 values".into(),
        ));
    }
    Ok(())
}

/// Serializes a combination together with the uncovered parameters of
/// `store`.
pub fn write_container(
    combo: &AdditiveCombo,
    store: &WeightStore,
    cfg: &StorageConfig,
) -> Result<Vec<u8>> {
    check_widths(cfg)?;
    combo.spec().check_bounds(store.len())?;
    let p = cfg.index_delta_bits;
    let mut out = BitWriter::default();
    let mut parts = Vec::with_capacity(combo.groups().len());
    for gi in 0..combo.groups().len() {
        let mut headers = Vec::with_capacity(combo.num_parts());
        for pi in 0..combo.num_parts() {
            let h = match combo.theta(pi, gi) {
                None => PartHeader::Absent,
                Some(CompressedPart::Quantization(q)) => {
                    for &c in q.codebook() {
                        out.write((c as f32).to_bits() as u64, 32);
                    }
                    let w = index_bits(q.k());
                    for &a in q.assignments() {
                        out.write(a as u64, w);
                    }
                    PartHeader::Quant {
                        k: q.k(),
                        adaptive: q.is_adaptive(),
                    }
                }
                Some(CompressedPart::SparseCorrection(s)) => {
                    let enc = encode_sparse_indices(s.indices(), p)?;
                    let mut values = s.values().iter();
                    for pair in &enc.pairs {
                        out.write(pair.delta, p);
                        let bits = if pair.dummy {
                            0
                        } else {
                            sparse_value_bits(*values.next().expect("one value per real pair"))
                        };
                        out.write(bits as u64, 16);
                    }
                    PartHeader::Sparse {
                        pairs: enc.pair_count(),
                        budget: s.budget(),
                    }
                }
                Some(CompressedPart::LowRank(f)) => {
                    for &v in f.u().as_slice().iter().chain(f.v().as_slice()) {
                        out.write(f16_bits(v) as u64, 16);
                    }
                    PartHeader::LowRank {
                        rank: f.rank(),
                        rows: f.rows(),
                        cols: f.cols(),
                    }
                }
            };
            headers.push(h);
        }
        parts.push(headers);
    }
    let mask = combo.compressed_mask(store.len());
    for (&v, &m) in store.values().iter().zip(&mask) {
        if !m {
            out.write((v as f32).to_bits() as u64, 32);
        }
    }

    let header = Header {
        layers: combo
            .groups()
            .iter()
            .filter_map(|g| g.layer)
            .max()
            .map_or(0, |l| l + 1),
        store_len: store.len(),
        segments: store.segments().to_vec(),
        storage: *cfg,
        spec: combo.spec().clone(),
        parts,
        payload_bits: out.bits,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(10 + json.len() + out.bytes.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&out.bytes);
    Ok(bytes)
}

/// A decoded container.
#[derive(Debug, Clone)]
pub struct Container {
    pub combo: AdditiveCombo,
    /// Deployable weights at stored precision.
    pub store: WeightStore,
    pub storage: StorageConfig,
    /// Payload length in bits, as consumed by the decoder.
    pub payload_bits: u64,
    pub payload_bytes: usize,
}

/// Decodes a container. Fails unless the decoder consumes exactly the
/// declared number of payload bits and the payload has no trailing bytes.
pub fn read_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an ALC1 container".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(e.to_string()))?;
    let payload = &body[hlen..];
    check_widths(&header.storage)?;
    header.spec.check_bounds(header.store_len)?;
    let p = header.storage.index_delta_bits;
    let mut r = BitReader {
        bytes: payload,
        bits: 0,
    };

    let num_parts = header.spec.schemes.len();
    let mut thetas: Vec<Vec<Option<CompressedPart>>> = vec![Vec::new(); num_parts];
    if header.parts.len() != header.spec.groups.len()
        || header.parts.iter().any(|h| h.len() != num_parts)
    {
        return Err(Error::Format(
            "part table does not match the combination".into(),
        ));
    }
    for (g, headers) in header.spec.groups.iter().zip(&header.parts) {
        for (pi, h) in headers.iter().enumerate() {
            let part = match *h {
                PartHeader::Absent => None,
                PartHeader::Quant { k, adaptive } => {
                    let codebook = (0..k)
                        .map(|_| r.read(32).map(|b| f32::from_bits(b as u32) as f64))
                        .collect::<Result<Vec<_>>>()?;
                    let w = index_bits(k);
                    let assignments = (0..g.len())
                        .map(|_| r.read(w).map(|a| a as usize))
                        .collect::<Result<Vec<_>>>()?;
                    Some(CompressedPart::Quantization(Quantization::new(
                        codebook,
                        assignments,
                        adaptive,
                    )?))
                }
                PartHeader::Sparse { pairs, budget } => {
                    let mut stream = Vec::with_capacity(pairs);
                    let mut values = Vec::new();
                    for _ in 0..pairs {
                        let delta = r.read(p)?;
                        let bits = r.read(16)?;
                        stream.push(IndexPair {
                            delta,
                            dummy: bits == 0,
                        });
                        if bits != 0 {
                            values.push(from_f16(bits));
                        }
                    }
                    let indices = decode_sparse_indices(&stream);
                    if indices.last().is_some_and(|&i| i >= g.len()) {
                        return Err(Error::Format(format!(
                            "sparse index outside group {}",
                            g.name
                        )));
                    }
                    Some(CompressedPart::SparseCorrection(SparseCorrection::new(
                        indices.into_iter().zip(values).collect(),
                        budget,
                    )?))
                }
                PartHeader::LowRank { rank, rows, cols } => {
                    let mut read_matrix = |m: usize| -> Result<Matrix> {
                        let vals = (0..m * rank)
                            .map(|_| r.read(16).map(from_f16))
                            .collect::<Result<Vec<_>>>()?;
                        Matrix::from_vec(m, rank, vals)
                    };
                    let u = read_matrix(rows)?;
                    let v = read_matrix(cols)?;
                    Some(CompressedPart::LowRank(LowRankFactors::new(u, v)?))
                }
            };
            thetas[pi].push(part);
        }
    }
    let combo = AdditiveCombo::from_parts(header.spec, thetas)?;
    let mask = combo.compressed_mask(header.store_len);
    let mut values = vec![0.0; header.store_len];
    for (v, &m) in values.iter_mut().zip(&mask) {
        if !m {
            *v = f32::from_bits(r.read(32)? as u32) as f64;
        }
    }
    combo.decompress_into(&mut values);
    let store = WeightStore::with_segments(values, header.segments)?;

    if r.bits != header.payload_bits {
        return Err(Error::Format(format!(
            "header declares {} payload bits, decoder consumed {}",
            header.payload_bits, r.bits
        )));
    }
    if payload.len() as u64 != r.bits.div_ceil(8) {
        return Err(Error::Format("payload has trailing bytes".into()));
    }
    Ok(Container {
        combo,
        store,
        storage: header.storage,
        payload_bits: r.bits,
        payload_bytes: payload.len(),
    })
}
