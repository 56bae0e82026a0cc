//! Packed dependency tensors and their binary record layout.
//!
//! Record (little-endian):
//!
//! | field        | type          |
//! |--------------|---------------|
//! | magic        | `"ISPM"`      |
//! | version      | u8            |
//! | dep_id       | u32           |
//! | rank         | u8            |
//! | dims         | u32 x rank    |
//! | bitwidth     | u8 (0 = passthrough) |
//! | flags        | u8 (bit0 = constant) |
//! | val_min      | f32           |
//! | scale_exp    | f64           |
//! | codec_id     | u8            |
//! | raw_len      | u32           |
//! | payload_len  | u32           |
//! | payload      | bytes         |

use std::fmt;
use std::str::FromStr;

use super::codec::Codec;
use super::quant::{check_bits, dequant, isquant, QuantHeader};
use super::shuffle::{bitshuffle, bitunshuffle, plane_len};
use super::IspmError;
use crate::graph::NodeId;
use crate::tensor::Tensor;

pub const RECORD_MAGIC: &[u8; 4] = b"ISPM";
pub const RECORD_VERSION: u8 = 1;
const FLAG_CONSTANT: u8 = 1;

/// Quantization level of a packing policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Bits(u8),
    /// Full 32-bit floats, no quantization or shuffling.
    Passthrough,
}

impl Precision {
    pub fn bits(bits: u8) -> Result<Self, IspmError> {
        check_bits(bits)?;
        Ok(Precision::Bits(bits))
    }

    /// Effective bits per element; passthrough counts as 32.
    pub fn width(self) -> u8 {
        match self {
            Precision::Bits(b) => b,
            Precision::Passthrough => 32,
        }
    }

    pub fn wire_id(self) -> u8 {
        match self {
            Precision::Bits(b) => b,
            Precision::Passthrough => 0,
        }
    }

    pub fn from_wire(id: u8) -> Result<Self, IspmError> {
        if id == 0 {
            Ok(Precision::Passthrough)
        } else {
            Self::bits(id)
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Bits(b) => f.pad(&b.to_string()),
            Precision::Passthrough => f.pad("fp32"),
        }
    }
}

impl FromStr for Precision {
    type Err = IspmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp32" | "32" | "passthrough" => Ok(Precision::Passthrough),
            _ => {
                let bits = s
                    .parse::<u8>()
                    .map_err(|_| IspmError::InvalidBitwidthName(s.to_string()))?;
                Self::bits(bits)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackingPolicy {
    pub precision: Precision,
    pub codec: Codec,
}

impl PackingPolicy {
    pub fn new(precision: Precision, codec: Codec) -> Self {
        Self { precision, codec }
    }

    pub fn passthrough() -> Self {
        Self::new(Precision::Passthrough, Codec::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub dep_id: NodeId,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub constant: bool,
    pub val_min: f32,
    pub scale_exp: f64,
    /// Codec actually applied; falls back to `None` when compression would
    /// not shrink the payload.
    pub codec: Codec,
    pub raw_len: usize,
    pub payload: Vec<u8>,
}

/// Quantize, bit-shuffle and compress one dependency tensor.
pub fn pack(dep_id: NodeId, t: &Tensor, policy: PackingPolicy) -> Result<PackedTensor, IspmError> {
    let (header, raw) = match policy.precision {
        Precision::Passthrough => {
            if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(IspmError::NonFiniteInput { index });
            }
            let header = QuantHeader { val_min: 0.0, scale_exp: 0.0, constant: false };
            (header, t.to_le_bytes())
        }
        Precision::Bits(bits) => {
            let (header, codes) = isquant(t, bits)?;
            let raw = if header.constant { Vec::new() } else { bitshuffle(&codes, bits)? };
            (header, raw)
        }
    };
    let (codec, payload) = if raw.is_empty() {
        (Codec::None, Vec::new())
    } else {
        let compressed = policy.codec.compress(&raw);
        if compressed.len() < raw.len() {
            (policy.codec, compressed)
        } else {
            (Codec::None, raw.clone())
        }
    };
    Ok(PackedTensor {
        dep_id,
        shape: t.shape().to_vec(),
        precision: policy.precision,
        constant: header.constant,
        val_min: header.val_min,
        scale_exp: header.scale_exp,
        codec,
        raw_len: raw.len(),
        payload,
    })
}

pub fn unpack(p: &PackedTensor) -> Result<Tensor, IspmError> {
    let n: usize = p.shape.iter().product();
    let expected_raw = p.expected_raw_len();
    if p.raw_len != expected_raw {
        return Err(IspmError::HeaderMismatch(format!(
            "raw_len {} does not match {} bytes implied by the header",
            p.raw_len, expected_raw
        )));
    }
    let raw = p.codec.decompress(&p.payload, p.raw_len)?;
    match p.precision {
        Precision::Passthrough => {
            Tensor::from_le_bytes(p.shape.clone(), &raw).map_err(|e| IspmError::HeaderMismatch(e.to_string()))
        }
        Precision::Bits(bits) => {
            let codes = if p.constant { Vec::new() } else { bitunshuffle(&raw, bits, n)? };
            let header = QuantHeader {
                val_min: p.val_min,
                scale_exp: p.scale_exp,
                constant: p.constant,
            };
            dequant(&header, bits, &p.shape, &codes)
        }
    }
}

impl PackedTensor {
    fn expected_raw_len(&self) -> usize {
        let n: usize = self.shape.iter().product();
        match self.precision {
            _ if self.constant => 0,
            Precision::Passthrough => 4 * n,
            Precision::Bits(b) => b as usize * plane_len(n),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 + 1 + 4 * self.shape.len() + 1 + 1 + 4 + 8 + 1 + 4 + 4 + self.payload.len()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(RECORD_MAGIC);
        out.push(RECORD_VERSION);
        out.extend_from_slice(&(self.dep_id as u32).to_le_bytes());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.push(self.precision.wire_id());
        out.push(if self.constant { FLAG_CONSTANT } else { 0 });
        out.extend_from_slice(&self.val_min.to_le_bytes());
        out.extend_from_slice(&self.scale_exp.to_le_bytes());
        out.push(self.codec.id());
        out.extend_from_slice(&(self.raw_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode(&mut out);
        out
    }

    /// Parses one record from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), IspmError> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != RECORD_MAGIC {
            return Err(IspmError::CorruptPayload("missing ISPM magic".into()));
        }
        let version = r.u8()?;
        if version != RECORD_VERSION {
            return Err(IspmError::CorruptPayload(format!("unsupported record version {version}")));
        }
        let dep_id = r.u32()? as NodeId;
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(IspmError::CorruptPayload("rank 0 tensor".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(IspmError::CorruptPayload("zero dimension".into()));
            }
            shape.push(d);
        }
        shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| IspmError::CorruptPayload("element count overflows".into()))?;
        let precision = Precision::from_wire(r.u8()?).map_err(|e| IspmError::CorruptPayload(e.to_string()))?;
        let flags = r.u8()?;
        if flags & !FLAG_CONSTANT != 0 {
            return Err(IspmError::CorruptPayload(format!("unknown flags {flags:#04x}")));
        }
        let val_min = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let scale_exp = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let codec = Codec::from_id(r.u8()?).map_err(|e| IspmError::CorruptPayload(e.to_string()))?;
        let raw_len = r.u32()? as usize;
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        let packed = PackedTensor {
            dep_id,
            shape,
            precision,
            constant: flags & FLAG_CONSTANT != 0,
            val_min,
            scale_exp,
            codec,
            raw_len,
            payload,
        };
        if packed.constant && precision == Precision::Passthrough {
            return Err(IspmError::CorruptPayload("constant flag on a passthrough record".into()));
        }
        if packed.raw_len != packed.expected_raw_len() {
            return Err(IspmError::CorruptPayload(format!(
                "raw_len {} inconsistent with header (expected {})",
                packed.raw_len,
                packed.expected_raw_len()
            )));
        }
        Ok((packed, r.at))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IspmError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IspmError::CorruptPayload(format!("record truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IspmError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IspmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
