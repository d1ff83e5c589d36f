//! Binary layout of a [`WireMessage`]. All integers little-endian.
//!
//! ```text
//! offset size
//!      0    4  magic "FPRO" (46 50 52 4F)
//!      4    1  version = 1
//!      5    1  kind (1 UPLOAD, 2 GLOBAL, 3 ACK, 4 REGISTER)
//!      6    4  round
//!     10    4  client_id (0 = server)
//!     14    2  num_classes
//!     16       per class, ascending class id:
//!               u16 class_id, u32 sample_count, u32 dim, dim × f32
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::PrototypeSet;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FPRO";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Bytes per class entry before its vector.
pub const CLASS_HEADER_LEN: usize = 10;
pub const LENGTH_PREFIX_LEN: usize = 4;
/// Round value carried by an ACK that rejects a registration.
pub const REJECT_ROUND: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Upload = 1,
    Global = 2,
    Ack = 3,
    Register = 4,
}

impl MessageKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(MessageKind::Upload),
            2 => Some(MessageKind::Global),
            3 => Some(MessageKind::Ack),
            4 => Some(MessageKind::Register),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u32,
    /// Sender or addressee; 0 is the server.
    pub client_id: u32,
    pub body: PrototypeSet,
}

impl WireMessage {
    pub fn new(kind: MessageKind, round: u32, client_id: u32, body: PrototypeSet) -> Self {
        WireMessage {
            kind,
            round,
            client_id,
            body,
        }
    }

    pub fn ack(round: u32, client_id: u32) -> Self {
        Self::new(MessageKind::Ack, round, client_id, PrototypeSet::new())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u8 },
    #[error("unknown message kind {kind} at offset {offset}")]
    UnknownKind { offset: usize, kind: u8 },
    #[error("truncated at offset {offset}: expected {expected} bytes, got {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite float at offset {offset}")]
    NonFinite { offset: usize },
    #[error("class id {class} at offset {offset} does not follow {previous}")]
    NonAscendingClass {
        offset: usize,
        class: u16,
        previous: u16,
    },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

/// Exact encoded length of a message carrying `set`.
pub fn encoded_len(set: &PrototypeSet) -> usize {
    HEADER_LEN
        + set
            .iter()
            .map(|(_, p)| CLASS_HEADER_LEN + 4 * p.vector.len())
            .sum::<usize>()
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let classes = u16::try_from(msg.body.len())
        .map_err(|_| Error::Encode(format!("{} classes exceed 65535", msg.body.len())))?;
    let mut out = Vec::with_capacity(encoded_len(&msg.body));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    for (class, p) in msg.body.iter() {
        let id = u16::try_from(class)
            .map_err(|_| Error::Encode(format!("class id {class} exceeds 65535")))?;
        let count = u32::try_from(p.count)
            .map_err(|_| Error::Encode(format!("class {class}: count {} exceeds u32", p.count)))?;
        let dim = u32::try_from(p.vector.len())
            .map_err(|_| Error::Encode(format!("class {class}: dim exceeds 2^32 - 1")))?;
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for &v in &p.vector {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(Error::Encode(format!(
                    "class {class}: value {v} is not representable as a finite binary32"
                )));
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

/// Parses one message. Total: every byte sequence yields a message or a
/// [`DecodeError`].
pub fn decode(bytes: &[u8]) -> std::result::Result<WireMessage, DecodeError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| DecodeError::BadMagic { offset: 0 })? != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion { offset: 4, version });
    }
    let kind_byte = c.u8()?;
    let kind = MessageKind::from_byte(kind_byte).ok_or(DecodeError::UnknownKind {
        offset: 5,
        kind: kind_byte,
    })?;
    let round = c.u32()?;
    let client_id = c.u32()?;
    let classes = c.u16()?;
    let mut body = PrototypeSet::new();
    let mut previous: Option<u16> = None;
    for _ in 0..classes {
        let at = c.pos;
        let class = c.u16()?;
        if let Some(prev) = previous {
            if class <= prev {
                return Err(DecodeError::NonAscendingClass {
                    offset: at,
                    class,
                    previous: prev,
                });
            }
        }
        previous = Some(class);
        let count = c.u32()?;
        let dim = c.u32()? as usize;
        let start = c.pos;
        let raw = c.take(dim.checked_mul(4).ok_or(DecodeError::Truncated {
            offset: start,
            expected: usize::MAX,
            actual: bytes.len(),
        })?)?;
        let mut vector = Vec::with_capacity(dim);
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4"));
            if !v.is_finite() {
                return Err(DecodeError::NonFinite {
                    offset: start + 4 * k,
                });
            }
            vector.push(f64::from(v));
        }
        body.insert_raw(usize::from(class), vector, u64::from(count));
    }
    if c.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            offset: c.pos,
            extra: bytes.len() - c.pos,
        });
    }
    Ok(WireMessage {
        kind,
        round,
        client_id,
        body,
    })
}

/// `decode(encode(set))`: the binary32 narrowing every exchanged prototype
/// undergoes, whichever transport carries it.
pub fn quantize(set: &PrototypeSet) -> Result<PrototypeSet> {
    let msg = WireMessage::new(MessageKind::Upload, 0, 0, set.clone());
    Ok(decode(&encode(&msg)?)?.body)
}

/// Writes `u32 LE length ‖ message`.
pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    let bytes = encode(msg)?;
    let len =
        u32::try_from(bytes.len()).map_err(|_| Error::Encode("frame exceeds 4 GiB".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed frame. A clean EOF before the prefix yields
/// `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(decode(&buf)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const ACK_FIXTURE: [u8; 16] = [
        0x46, 0x50, 0x52, 0x4F, 0x01, 0x03, 0x03, 0x00, 0x00, 0x00, 0x07, 0x00, 0x00, 0x00, 0x00,
        0x00,
    ];

    #[test]
    fn ack_golden_bytes() {
        let msg = WireMessage::ack(3, 7);
        assert_eq!(encode(&msg).unwrap(), ACK_FIXTURE);
        assert_eq!(decode(&ACK_FIXTURE).unwrap(), msg);
    }

    #[test]
    fn one_class_golden_bytes() {
        let mut body = PrototypeSet::new();
        body.insert(2, vec![1.0, 0.0], 1).unwrap();
        let msg = WireMessage::new(MessageKind::Upload, 3, 7, body);
        let bytes = encode(&msg).unwrap();
        let mut want = vec![
            0x46, 0x50, 0x52, 0x4F, 0x01, 0x01, 3, 0, 0, 0, 7, 0, 0, 0, 1, 0,
        ];
        want.extend_from_slice(&[
            0x02, 0x00, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3F,
            0x00, 0x00, 0x00, 0x00,
        ]);
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), encoded_len(&msg.body));
    }

    #[test]
    fn corrupted_magic() {
        let mut b = ACK_FIXTURE;
        b[0] = 0x00;
        assert_eq!(decode(&b), Err(DecodeError::BadMagic { offset: 0 }));
        assert_eq!(decode(&[]), Err(DecodeError::BadMagic { offset: 0 }));
    }

    #[test]
    fn bad_version_and_kind() {
        let mut b = ACK_FIXTURE;
        b[4] = 2;
        assert!(matches!(
            decode(&b),
            Err(DecodeError::UnsupportedVersion { offset: 4, .. })
        ));
        let mut b = ACK_FIXTURE;
        b[5] = 9;
        assert!(matches!(
            decode(&b),
            Err(DecodeError::UnknownKind { offset: 5, kind: 9 })
        ));
    }

    #[test]
    fn truncated_mid_vector() {
        let mut body = PrototypeSet::new();
        body.insert(1, vec![1.0, 2.0, 3.0], 4).unwrap();
        let bytes = encode(&WireMessage::new(MessageKind::Global, 1, 0, body)).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        match decode(cut) {
            Err(DecodeError::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, cut.len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_and_order_rejected() {
        let mut body = PrototypeSet::new();
        body.insert(1, vec![1.0], 1).unwrap();
        body.insert(4, vec![2.0], 1).unwrap();
        let mut bytes = encode(&WireMessage::new(MessageKind::Upload, 0, 1, body)).unwrap();
        let second_class = HEADER_LEN + CLASS_HEADER_LEN + 4;
        let mut swapped = bytes.clone();
        swapped[second_class] = 1;
        assert!(matches!(
            decode(&swapped),
            Err(DecodeError::NonAscendingClass { offset, .. }) if offset == second_class
        ));
        let float_at = HEADER_LEN + CLASS_HEADER_LEN;
        bytes[float_at..float_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            decode(&bytes),
            Err(DecodeError::NonFinite { offset: float_at })
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = ACK_FIXTURE.to_vec();
        b.push(0);
        assert!(matches!(
            decode(&b),
            Err(DecodeError::TrailingBytes {
                offset: 16,
                extra: 1
            })
        ));
    }

    #[test]
    fn encode_rejects_unrepresentable() {
        let mut body = PrototypeSet::new();
        body.insert(70_000, vec![1.0], 1).unwrap();
        assert!(encode(&WireMessage::new(MessageKind::Upload, 0, 0, body)).is_err());
        let mut body = PrototypeSet::new();
        body.insert(1, vec![1e300], 1).unwrap();
        assert!(encode(&WireMessage::new(MessageKind::Upload, 0, 0, body)).is_err());
    }

    #[test]
    fn frames_over_a_buffer() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &WireMessage::ack(1, 2)).unwrap();
        write_frame(&mut buf, &WireMessage::ack(3, 4)).unwrap();
        assert_eq!(buf.len(), 2 * (LENGTH_PREFIX_LEN + HEADER_LEN));
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap().round, 1);
        assert_eq!(read_frame(&mut r).unwrap().unwrap().client_id, 4);
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
