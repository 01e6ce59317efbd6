//! Wire encoding for bus frames.
//!
//! ```text
//! u32 BE   body length
//! body:
//!   u8       message type
//!   u16 BE   name length, then UTF-8 name
//!   u32 BE   payload length, then payload
//! ```

use std::io::{self, Read, Write};

use super::EventName;

/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: usize = 65536;
/// Largest legal body: type byte, name header and name, payload header and payload.
pub const MAX_BODY: usize = 1 + 2 + EventName::MAX_LEN + 4 + MAX_PAYLOAD;
const MIN_BODY: usize = 1 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Subscribe = 2,
    Unsubscribe = 3,
    Post = 4,
    Event = 5,
    Ping = 6,
    Pong = 7,
    Error = 8,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => MsgType::Hello,
            2 => MsgType::Subscribe,
            3 => MsgType::Unsubscribe,
            4 => MsgType::Post,
            5 => MsgType::Event,
            6 => MsgType::Ping,
            7 => MsgType::Pong,
            8 => MsgType::Error,
            _ => return None,
        })
    }

    /// Whether frames of this type address an event name.
    pub fn is_named(self) -> bool {
        matches!(
            self,
            MsgType::Subscribe | MsgType::Unsubscribe | MsgType::Post | MsgType::Event
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("body length {0} outside [{MIN_BODY}, {MAX_BODY}]")]
    BadLength(usize),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("bad event name: {0}")]
    BadName(String),
    #[error("{0:?} frame must {1} a name")]
    NameMismatch(MsgType, &'static str),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(usize),
    #[error("declared lengths disagree with body size")]
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    /// Present exactly for the named message types.
    pub name: Option<EventName>,
    pub payload: Vec<u8>,
}

impl Frame {
    /// Builds a frame, checking that the name is present iff the type needs
    /// one and that the payload fits.
    pub fn new(
        kind: MsgType,
        name: Option<EventName>,
        payload: Vec<u8>,
    ) -> Result<Self, FrameError> {
        match (kind.is_named(), name.is_some()) {
            (true, false) => return Err(FrameError::NameMismatch(kind, "carry")),
            (false, true) => return Err(FrameError::NameMismatch(kind, "not carry")),
            _ => {}
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLarge(payload.len()));
        }
        Ok(Frame {
            kind,
            name,
            payload,
        })
    }

    pub fn hello() -> Self {
        Self::unnamed(MsgType::Hello, super::HELLO_PAYLOAD.to_vec())
    }

    pub fn ping() -> Self {
        Self::unnamed(MsgType::Ping, Vec::new())
    }

    pub fn pong() -> Self {
        Self::unnamed(MsgType::Pong, Vec::new())
    }

    pub fn error(msg: &str) -> Self {
        let mut payload = msg.as_bytes().to_vec();
        payload.truncate(MAX_PAYLOAD);
        Self::unnamed(MsgType::Error, payload)
    }

    pub fn named(kind: MsgType, name: EventName, payload: Vec<u8>) -> Self {
        debug_assert!(kind.is_named() && payload.len() <= MAX_PAYLOAD);
        Frame {
            kind,
            name: Some(name),
            payload,
        }
    }

    fn unnamed(kind: MsgType, payload: Vec<u8>) -> Self {
        Frame {
            kind,
            name: None,
            payload,
        }
    }

    fn name_bytes(&self) -> &[u8] {
        self.name.as_ref().map_or(&[], |n| n.as_str().as_bytes())
    }

    pub fn body_len(&self) -> usize {
        1 + 2 + self.name_bytes().len() + 4 + self.payload.len()
    }

    /// Full wire image including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let name = self.name_bytes();
        let body_len = self.body_len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes a complete wire image (length prefix included).
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::Truncated);
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        check_body_len(len)?;
        if bytes.len() - 4 != len {
            return Err(FrameError::Truncated);
        }
        Self::decode_body(&bytes[4..])
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, FrameError> {
        check_body_len(body.len())?;
        let kind = MsgType::from_byte(body[0]).ok_or(FrameError::BadType(body[0]))?;
        let name_len = u16::from_be_bytes([body[1], body[2]]) as usize;
        let rest = &body[3..];
        if rest.len() < name_len + 4 {
            return Err(FrameError::Truncated);
        }
        let (name_raw, rest) = rest.split_at(name_len);
        let payload_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        let payload = &rest[4..];
        if payload.len() != payload_len {
            return Err(FrameError::Truncated);
        }
        let name = if name_raw.is_empty() {
            None
        } else {
            let text = std::str::from_utf8(name_raw)
                .map_err(|_| FrameError::BadName(String::from_utf8_lossy(name_raw).into()))?;
            // Names on the wire must already be canonical.
            let name =
                EventName::new(text).map_err(|_| FrameError::BadName(text.to_string()))?;
            if name.as_str() != text {
                return Err(FrameError::BadName(text.to_string()));
            }
            Some(name)
        };
        Frame::new(kind, name, payload.to_vec())
    }

    /// Reads one frame. A clean EOF before the length prefix yields
    /// [`FrameError::Eof`].
    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self, FrameError> {
        let mut len_buf = [0u8; 4];
        match reader.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Eof),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        check_body_len(len)?;
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FrameError::Eof
            } else {
                e.into()
            }
        })?;
        Self::decode_body(&body)
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        writer.write_all(&self.encode())?;
        writer.flush()
    }
}

fn check_body_len(len: usize) -> Result<(), FrameError> {
    if (MIN_BODY..=MAX_BODY).contains(&len) {
        Ok(())
    } else {
        Err(FrameError::BadLength(len))
    }
}
