//! Public-channel record format.
//!
//! ```text
//! offset  size  field
//! 0       1     version (currently 1)
//! 1       1     message type
//! 2       8     frame or block id, big-endian
//! 10      4     payload length in bytes, big-endian
//! 14      n     payload
//! ```
//!
//! Payload fields are big-endian. A list is a `u32` count followed by its
//! items; a bit string is a `u32` bit count followed by the bits packed
//! MSB-first with zero padding. Decoding rejects non-zero padding, bytes
//! outside the declared payload, and trailing payload bytes, so every valid
//! record has exactly one encoding.

use thiserror::Error;

use super::ParityDisclosure;
use crate::bits::{self, Bits};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("record truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Bob: slots where he saw a single click, and the basis he measured in.
    DetectionReport {
        slots: Vec<u64>,
        bases: Bits,
    },
    /// Slots both parties keep.
    SiftAccept {
        kept: Vec<u64>,
    },
    /// Alice, SARG: for each detected slot, the announced pair as the value
    /// of the basis-0 state and the value of the basis-1 state.
    SargAnnounce {
        slots: Vec<u64>,
        pairs: Vec<(u8, u8)>,
    },
    /// Positions sampled for error estimation and Alice's bits there.
    QberSample {
        indices: Vec<u32>,
        bits: Bits,
    },
    CascadeParities {
        parities: Vec<ParityDisclosure>,
    },
    VerifyHash {
        hash: u64,
    },
    PrivacySeed {
        target_len: u32,
        seed: Bits,
    },
    AuthTag {
        round: u8,
        tag: u64,
    },
    RelayCiphertext {
        session: u64,
        hop: u32,
        ciphertext: Bits,
    },
    SessionAbort {
        session: u64,
    },
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::DetectionReport { .. } => 0x01,
            Message::SiftAccept { .. } => 0x02,
            Message::SargAnnounce { .. } => 0x03,
            Message::QberSample { .. } => 0x04,
            Message::CascadeParities { .. } => 0x05,
            Message::VerifyHash { .. } => 0x06,
            Message::PrivacySeed { .. } => 0x07,
            Message::AuthTag { .. } => 0x08,
            Message::RelayCiphertext { .. } => 0x09,
            Message::SessionAbort { .. } => 0x0a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub frame_id: u64,
    pub message: Message,
}

impl Record {
    pub fn new(frame_id: u64, message: Message) -> Record {
        Record { frame_id, message }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("wire field exceeds u32").to_be_bytes());
}

fn put_bits(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend(bits::to_bytes(b));
}

fn put_u64s(out: &mut Vec<u8>, v: &[u64]) {
    put_u32(out, v.len());
    for x in v {
        out.extend_from_slice(&x.to_be_bytes());
    }
}

fn payload(m: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match m {
        Message::DetectionReport { slots, bases } => {
            put_u64s(&mut p, slots);
            put_bits(&mut p, bases);
        }
        Message::SiftAccept { kept } => put_u64s(&mut p, kept),
        Message::SargAnnounce { slots, pairs } => {
            put_u64s(&mut p, slots);
            let flat: Bits = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            put_bits(&mut p, &flat);
        }
        Message::QberSample { indices, bits } => {
            put_u32(&mut p, indices.len());
            for i in indices {
                p.extend_from_slice(&i.to_be_bytes());
            }
            put_bits(&mut p, bits);
        }
        Message::CascadeParities { parities } => {
            put_u32(&mut p, parities.len());
            for d in parities {
                p.push(d.pass);
                p.extend_from_slice(&d.start.to_be_bytes());
                p.extend_from_slice(&d.end.to_be_bytes());
                p.push(d.parity);
            }
        }
        Message::VerifyHash { hash } => p.extend_from_slice(&hash.to_be_bytes()),
        Message::PrivacySeed { target_len, seed } => {
            p.extend_from_slice(&target_len.to_be_bytes());
            put_bits(&mut p, seed);
        }
        Message::AuthTag { round, tag } => {
            p.push(*round);
            p.extend_from_slice(&tag.to_be_bytes());
        }
        Message::RelayCiphertext {
            session,
            hop,
            ciphertext,
        } => {
            p.extend_from_slice(&session.to_be_bytes());
            p.extend_from_slice(&hop.to_be_bytes());
            put_bits(&mut p, ciphertext);
        }
        Message::SessionAbort { session } => p.extend_from_slice(&session.to_be_bytes()),
    }
    p
}

pub fn encode(record: &Record) -> Vec<u8> {
    let p = payload(&record.message);
    let mut out = Vec::with_capacity(HEADER_LEN + p.len());
    out.push(WIRE_VERSION);
    out.push(record.message.type_code());
    out.extend_from_slice(&record.frame_id.to_be_bytes());
    put_u32(&mut out, p.len());
    out.extend(p);
    out
}

/// Concatenated encoding of several records.
pub fn encode_all(records: &[Record]) -> Vec<u8> {
    records.iter().flat_map(encode).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.at;
        if n > available {
            return Err(WireError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, item_len: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        let needed = n.saturating_mul(item_len);
        let available = self.buf.len() - self.at;
        if needed > available {
            return Err(WireError::Truncated { needed, available });
        }
        Ok(n)
    }

    fn bits(&mut self) -> Result<Bits, WireError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.div_ceil(8))?;
        if n % 8 != 0 && bytes[bytes.len() - 1] & (0xff >> (n % 8)) != 0 {
            return Err(WireError::Malformed("non-zero padding bits".into()));
        }
        Ok(bits::from_bytes(bytes, n))
    }

    fn u64s(&mut self) -> Result<Vec<u64>, WireError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    fn bit(&mut self) -> Result<u8, WireError> {
        match self.u8()? {
            b @ (0 | 1) => Ok(b),
            other => Err(WireError::Malformed(format!("expected a bit, got {other}"))),
        }
    }
}

fn parse_payload(code: u8, p: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: p, at: 0 };
    let m = match code {
        0x01 => {
            let slots = r.u64s()?;
            let bases = r.bits()?;
            if bases.len() != slots.len() {
                return Err(WireError::Malformed("basis count differs from slot count".into()));
            }
            Message::DetectionReport { slots, bases }
        }
        0x02 => Message::SiftAccept { kept: r.u64s()? },
        0x03 => {
            let slots = r.u64s()?;
            let flat = r.bits()?;
            if flat.len() != 2 * slots.len() {
                return Err(WireError::Malformed("announcement count differs from slot count".into()));
            }
            Message::SargAnnounce {
                slots,
                pairs: flat.chunks(2).map(|c| (c[0], c[1])).collect(),
            }
        }
        0x04 => {
            let n = r.count(4)?;
            let indices = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
            Message::QberSample {
                indices,
                bits: r.bits()?,
            }
        }
        0x05 => {
            let n = r.count(10)?;
            let mut parities = Vec::with_capacity(n);
            for _ in 0..n {
                let pass = r.u8()?;
                let start = r.u32()?;
                let end = r.u32()?;
                let parity = r.bit()?;
                parities.push(ParityDisclosure {
                    pass,
                    start,
                    end,
                    parity,
                });
            }
            Message::CascadeParities { parities }
        }
        0x06 => Message::VerifyHash { hash: r.u64()? },
        0x07 => Message::PrivacySeed {
            target_len: r.u32()?,
            seed: r.bits()?,
        },
        0x08 => Message::AuthTag {
            round: r.u8()?,
            tag: r.u64()?,
        },
        0x09 => Message::RelayCiphertext {
            session: r.u64()?,
            hop: r.u32()?,
            ciphertext: r.bits()?,
        },
        0x0a => Message::SessionAbort { session: r.u64()? },
        other => return Err(WireError::UnknownType(other)),
    };
    if r.at != p.len() {
        return Err(WireError::Malformed(format!("{} trailing payload bytes", p.len() - r.at)));
    }
    Ok(m)
}

/// Decode one record from the front of `buf`; returns it and the bytes used.
pub fn decode(buf: &[u8]) -> Result<(Record, usize), WireError> {
    let mut r = Reader { buf, at: 0 };
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(WireError::Version(version));
    }
    let code = r.u8()?;
    let frame_id = r.u64()?;
    let len = r.u32()? as usize;
    let p = r.take(len)?;
    Ok((
        Record {
            frame_id,
            message: parse_payload(code, p)?,
        },
        r.at,
    ))
}

/// Decode a concatenation of records.
pub fn decode_all(mut buf: &[u8]) -> Result<Vec<Record>, WireError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (rec, used) = decode(buf)?;
        out.push(rec);
        buf = &buf[used..];
    }
    Ok(out)
}
