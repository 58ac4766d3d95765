//! Binary message frames.
//!
//! Layout: kind (1 byte), sender (u32 LE), round tag (u32 LE), element count
//! (u32 LE), then `count` IEEE-754 doubles (LE).

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 13;
/// Payloads must stay below `2^31` elements.
pub const MAX_PAYLOAD: usize = (1 << 31) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    ParamPush = 0,
    PullRequest = 1,
    PullReply = 2,
    EaUpdate = 3,
    /// Empty payload: a request for the center. Non-empty: the center.
    EaCenter = 4,
    Barrier = 5,
    RingChunk = 6,
}

impl TryFrom<u8> for MessageKind {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0 => MessageKind::ParamPush,
            1 => MessageKind::PullRequest,
            2 => MessageKind::PullReply,
            3 => MessageKind::EaUpdate,
            4 => MessageKind::EaCenter,
            5 => MessageKind::Barrier,
            6 => MessageKind::RingChunk,
            other => return Err(Error::Decode(format!("unknown message kind byte {other:#04x}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: u32,
    pub round_tag: u32,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn new(kind: MessageKind, sender: usize, round_tag: u32, payload: Vec<f64>) -> Self {
        Message {
            kind,
            sender: sender as u32,
            round_tag,
            payload,
        }
    }

    pub fn sender(&self) -> usize {
        self.sender as usize
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    if msg.payload.len() > MAX_PAYLOAD {
        return Err(Error::invalid(format!(
            "payload of {} elements exceeds the frame limit",
            msg.payload.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * msg.payload.len());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&msg.round_tag.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    for x in &msg.payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "truncated frame: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let kind = MessageKind::try_from(bytes[0])?;
    let sender = read_u32(bytes, 1);
    let round_tag = read_u32(bytes, 5);
    let count = read_u32(bytes, 9) as usize;
    if count > MAX_PAYLOAD {
        return Err(Error::Decode(format!("element count {count} exceeds the frame limit")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(Error::Decode(format!(
            "frame declares {count} elements but carries {} payload bytes",
            body.len()
        )));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Ok(Message {
        kind,
        sender,
        round_tag,
        payload,
    })
}
