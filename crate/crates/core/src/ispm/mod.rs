//! Input-specific packing of dependency tensors: per-tensor quantization,
//! bit-plane shuffling and LZ4 block compression, plus the inverse path.

pub mod codec;
pub mod lz4;
pub mod packed;
pub mod quant;
pub mod shuffle;

use thiserror::Error;

pub use codec::Codec;
pub use packed::{pack, unpack, PackedTensor, PackingPolicy, Precision};
pub use quant::{dequant, error_bound, isquant, QuantHeader};
pub use shuffle::{bitshuffle, bitunshuffle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IspmError {
    #[error("non-finite value at element {index}")]
    NonFiniteInput { index: usize },
    #[error("bitwidth {0} outside 1..=16")]
    InvalidBitwidth(u8),
    #[error("invalid bitwidth `{0}` (expected 1..=16 or fp32)")]
    InvalidBitwidthName(String),
    #[error("code {value} at {index} does not fit in {bits} bits")]
    ValueOverflow { index: usize, value: u16, bits: u8 },
    #[error("quantization header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("unknown codec `{0}`")]
    UnknownCodecName(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}
