//! Length-prefixed binary messages.
//!
//! Frame: u32 LE body length, then the body:
//!
//! | field        | type                     |
//! |--------------|--------------------------|
//! | magic        | `"DYNO"`                 |
//! | version      | u8                       |
//! | msg_type     | u8                       |
//! | request_id   | u64                      |
//! | split        | u32                      |
//! | tensor_count | u16                      |
//! | tensors      | packed tensor records    |
//! | trailer      | rest of the body         |
//!
//! Trailers: HELLO carries the 32-byte model digest; INFER_RESPONSE the
//! server compute time as f32 ms; a PROFILE_FEEDBACK reply carries u32
//! requests served and f32 mean server ms (the query has none); ERROR
//! carries u8 code, u16 length and a UTF-8 message.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::ispm::{IspmError, PackedTensor};

pub const MAGIC: &[u8; 4] = b"DYNO";
pub const VERSION: u8 = 1;
/// Bytes before the first tensor record.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 4 + 2;
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("peer closed the connection")]
    Closed,
    #[error("frame of {0} bytes exceeds the limit")]
    Oversized(usize),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("bad tensor record: {0}")]
    Record(#[from] IspmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    InferRequest = 1,
    InferResponse = 2,
    ProfileFeedback = 3,
    Hello = 4,
    Error = 5,
}

impl MsgType {
    fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            1 => MsgType::InferRequest,
            2 => MsgType::InferResponse,
            3 => MsgType::ProfileFeedback,
            4 => MsgType::Hello,
            5 => MsgType::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    VersionMismatch = 1,
    Malformed = 2,
    Execution = 3,
    NotReady = 4,
}

impl ErrorCode {
    fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            1 => ErrorCode::VersionMismatch,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::Execution,
            4 => ErrorCode::NotReady,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        digest: [u8; 32],
    },
    InferRequest {
        request_id: u64,
        split: u32,
        tensors: Vec<PackedTensor>,
    },
    InferResponse {
        request_id: u64,
        split: u32,
        tensors: Vec<PackedTensor>,
        server_ms: f32,
    },
    FeedbackQuery {
        request_id: u64,
    },
    Feedback {
        request_id: u64,
        served: u32,
        mean_server_ms: f32,
    },
    Error {
        request_id: u64,
        code: ErrorCode,
        message: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello { .. } => MsgType::Hello,
            Message::InferRequest { .. } => MsgType::InferRequest,
            Message::InferResponse { .. } => MsgType::InferResponse,
            Message::FeedbackQuery { .. } | Message::Feedback { .. } => MsgType::ProfileFeedback,
            Message::Error { .. } => MsgType::Error,
        }
    }

    pub fn request_id(&self) -> u64 {
        match self {
            Message::Hello { .. } => 0,
            Message::InferRequest { request_id, .. }
            | Message::InferResponse { request_id, .. }
            | Message::FeedbackQuery { request_id }
            | Message::Feedback { request_id, .. }
            | Message::Error { request_id, .. } => *request_id,
        }
    }

    /// Message body without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        self.encode_with_version(VERSION)
    }

    pub fn encode_with_version(&self, version: u8) -> Vec<u8> {
        let (split, tensors): (u32, &[PackedTensor]) = match self {
            Message::InferRequest { split, tensors, .. } | Message::InferResponse { split, tensors, .. } => {
                (*split, tensors)
            }
            _ => (0, &[]),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + tensors.iter().map(|t| t.encoded_len()).sum::<usize>() + 40);
        out.extend_from_slice(MAGIC);
        out.push(version);
        out.push(self.msg_type() as u8);
        out.extend_from_slice(&self.request_id().to_le_bytes());
        out.extend_from_slice(&split.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
        for t in tensors {
            t.encode(&mut out);
        }
        match self {
            Message::Hello { digest } => out.extend_from_slice(digest),
            Message::InferResponse { server_ms, .. } => out.extend_from_slice(&server_ms.to_le_bytes()),
            Message::Feedback { served, mean_server_ms, .. } => {
                out.extend_from_slice(&served.to_le_bytes());
                out.extend_from_slice(&mean_server_ms.to_le_bytes());
            }
            Message::Error { code, message, .. } => {
                let text = &message.as_bytes()[..message.len().min(u16::MAX as usize)];
                out.push(*code as u8);
                out.extend_from_slice(&(text.len() as u16).to_le_bytes());
                out.extend_from_slice(text);
            }
            Message::InferRequest { .. } | Message::FeedbackQuery { .. } => {}
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        if body.len() < HEADER_LEN {
            return Err(WireError::Malformed(format!("{}-byte body is shorter than the header", body.len())));
        }
        if &body[..4] != MAGIC {
            return Err(WireError::Malformed("bad magic".into()));
        }
        if body[4] != VERSION {
            return Err(WireError::Version(body[4]));
        }
        let msg_type =
            MsgType::from_id(body[5]).ok_or_else(|| WireError::Malformed(format!("unknown message type {}", body[5])))?;
        let request_id = u64::from_le_bytes(body[6..14].try_into().unwrap());
        let split = u32::from_le_bytes(body[14..18].try_into().unwrap());
        let count = u16::from_le_bytes(body[18..20].try_into().unwrap()) as usize;
        let mut at = HEADER_LEN;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let (t, used) = PackedTensor::decode(&body[at..])?;
            tensors.push(t);
            at += used;
        }
        let trailer = &body[at..];
        let no_tensors = |kind: &str| {
            if count == 0 {
                Ok(())
            } else {
                Err(WireError::Malformed(format!("{kind} carries {count} tensors")))
            }
        };
        let trailer_len = |n: usize| {
            if trailer.len() == n {
                Ok(())
            } else {
                Err(WireError::Malformed(format!("{:?} trailer is {} bytes, expected {n}", msg_type, trailer.len())))
            }
        };
        Ok(match msg_type {
            MsgType::Hello => {
                no_tensors("HELLO")?;
                trailer_len(32)?;
                Message::Hello { digest: trailer.try_into().unwrap() }
            }
            MsgType::InferRequest => {
                trailer_len(0)?;
                Message::InferRequest { request_id, split, tensors }
            }
            MsgType::InferResponse => {
                trailer_len(4)?;
                let server_ms = f32::from_le_bytes(trailer.try_into().unwrap());
                Message::InferResponse { request_id, split, tensors, server_ms }
            }
            MsgType::ProfileFeedback => {
                no_tensors("PROFILE_FEEDBACK")?;
                match trailer.len() {
                    0 => Message::FeedbackQuery { request_id },
                    8 => Message::Feedback {
                        request_id,
                        served: u32::from_le_bytes(trailer[..4].try_into().unwrap()),
                        mean_server_ms: f32::from_le_bytes(trailer[4..].try_into().unwrap()),
                    },
                    n => return Err(WireError::Malformed(format!("PROFILE_FEEDBACK trailer is {n} bytes"))),
                }
            }
            MsgType::Error => {
                no_tensors("ERROR")?;
                if trailer.len() < 3 {
                    return Err(WireError::Malformed("truncated ERROR trailer".into()));
                }
                let code = ErrorCode::from_id(trailer[0])
                    .ok_or_else(|| WireError::Malformed(format!("unknown error code {}", trailer[0])))?;
                let n = u16::from_le_bytes([trailer[1], trailer[2]]) as usize;
                trailer_len(3 + n)?;
                let message = String::from_utf8_lossy(&trailer[3..]).into_owned();
                Message::Error { request_id, code, message }
            }
        })
    }
}

/// Peeks the version byte of a body that failed to decode.
pub fn body_version(body: &[u8]) -> Option<u8> {
    (body.len() > 4 && &body[..4] == MAGIC).then(|| body[4])
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), WireError> {
    if body.len() > MAX_FRAME {
        return Err(WireError::Oversized(body.len()));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body; `Closed` on a clean end of stream at a frame
/// boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(WireError::Oversized(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(body)
}

/// Bytes a message occupies on the link, length prefix included.
pub fn frame_len(body: &[u8]) -> usize {
    4 + body.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ispm::{pack, PackingPolicy};
    use crate::tensor::Tensor;

    fn logits() -> PackedTensor {
        let t = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        pack(15, &t, PackingPolicy::passthrough()).unwrap()
    }

    #[test]
    fn golden_request_bytes() {
        let msg = Message::InferRequest { request_id: 7, split: 15, tensors: vec![logits()] };
        let body = msg.encode();
        let mut expected = b"DYNO".to_vec();
        expected.extend_from_slice(&[1, 1]);
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&15u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&logits().to_bytes());
        assert_eq!(body, expected);
        assert_eq!(body, msg.encode());
        assert_eq!(Message::decode(&body).unwrap(), msg);
    }

    #[test]
    fn every_kind_round_trips() {
        let msgs = [
            Message::Hello { digest: [9; 32] },
            Message::InferResponse { request_id: 1, split: 3, tensors: vec![logits()], server_ms: 2.5 },
            Message::FeedbackQuery { request_id: 2 },
            Message::Feedback { request_id: 2, served: 10, mean_server_ms: 1.25 },
            Message::Error { request_id: 3, code: ErrorCode::Malformed, message: "no".into() },
            Message::InferRequest { request_id: 4, split: 0, tensors: vec![] },
        ];
        for m in msgs {
            let mut framed = Vec::new();
            write_frame(&mut framed, &m.encode()).unwrap();
            let body = read_frame(&mut framed.as_slice()).unwrap();
            assert_eq!(Message::decode(&body).unwrap(), m);
        }
    }

    #[test]
    fn rejects_bad_bodies() {
        let body = Message::Hello { digest: [0; 32] }.encode();
        let mut bad_type = body.clone();
        bad_type[5] = 77;
        assert!(matches!(Message::decode(&bad_type), Err(WireError::Malformed(_))));
        let old = Message::Hello { digest: [0; 32] }.encode_with_version(9);
        assert!(matches!(Message::decode(&old), Err(WireError::Version(9))));
        assert_eq!(body_version(&old), Some(9));
        assert!(Message::decode(&body[..body.len() - 1]).is_err());
        assert!(Message::decode(&body[..10]).is_err());

        let req = Message::InferRequest { request_id: 1, split: 2, tensors: vec![logits()] }.encode();
        assert!(Message::decode(&req[..req.len() - 3]).is_err());
    }

    #[test]
    fn framing_edges() {
        assert!(matches!(read_frame(&mut [].as_slice()), Err(WireError::Closed)));
        assert!(read_frame(&mut [3, 0].as_slice()).is_err());
        assert!(read_frame(&mut [5, 0, 0, 0, 1].as_slice()).is_err());
        let huge = ((MAX_FRAME + 1) as u32).to_le_bytes();
        assert!(matches!(read_frame(&mut huge.as_slice()), Err(WireError::Oversized(_))));
    }
}
