use super::{lz4, IspmError};

/// Lossless byte codec, identified on the wire by a single byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Codec {
    None,
    /// LZ4 block format.
    Lz4,
}

impl Codec {
    pub fn id(self) -> u8 {
        match self {
            Codec::None => 0,
            Codec::Lz4 => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, IspmError> {
        match id {
            0 => Ok(Codec::None),
            1 => Ok(Codec::Lz4),
            other => Err(IspmError::UnknownCodec(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::Lz4 => "lz4",
        }
    }

    pub fn compress(self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::None => raw.to_vec(),
            Codec::Lz4 => lz4::compress(raw),
        }
    }

    pub fn decompress(self, payload: &[u8], raw_len: usize) -> Result<Vec<u8>, IspmError> {
        match self {
            Codec::None if payload.len() == raw_len => Ok(payload.to_vec()),
            Codec::None => Err(IspmError::CorruptPayload(format!(
                "stored payload is {} bytes, expected {raw_len}",
                payload.len()
            ))),
            Codec::Lz4 => lz4::decompress(payload, raw_len).map_err(|e| IspmError::CorruptPayload(e.0)),
        }
    }
}

impl std::str::FromStr for Codec {
    type Err = IspmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Codec::None),
            "lz4" => Ok(Codec::Lz4),
            _ => Err(IspmError::UnknownCodecName(s.to_string())),
        }
    }
}
