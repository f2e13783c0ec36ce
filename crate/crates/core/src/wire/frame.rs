//! Frame layout (little-endian):
//!
//! ```text
//! length u32 | msg_type u16 | correlation_id u64 | flags u16 | body
//! ```
//!
//! `length` counts the body bytes only. Flag bit 0 marks an LZ4 frame
//! compressed body; the LZ4 content checksum guards it.

use std::io::{Read, Write};

use super::message::Message;
use super::WireError;

pub const HEADER_LEN: usize = 16;
pub const MAX_BODY: usize = 64 * 1024 * 1024;
pub const FLAG_COMPRESSED: u16 = 0x0001;

pub const PREAMBLE_MAGIC: &[u8; 4] = b"DFS1";
pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub length: u32,
    pub msg_type: u16,
    pub correlation_id: u64,
    pub flags: u16,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&self.length.to_le_bytes());
        h[4..6].copy_from_slice(&self.msg_type.to_le_bytes());
        h[6..14].copy_from_slice(&self.correlation_id.to_le_bytes());
        h[14..16].copy_from_slice(&self.flags.to_le_bytes());
        h
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Truncated);
        }
        Ok(Self {
            length: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            msg_type: u16::from_le_bytes(buf[4..6].try_into().unwrap()),
            correlation_id: u64::from_le_bytes(buf[6..14].try_into().unwrap()),
            flags: u16::from_le_bytes(buf[14..16].try_into().unwrap()),
        })
    }
}

fn compress(body: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut info = lz4_flex::frame::FrameInfo::new();
    info.content_checksum = true;
    let mut enc = lz4_flex::frame::FrameEncoder::with_frame_info(info, Vec::new());
    enc.write_all(body)
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    enc.finish()
        .map_err(|e| WireError::Malformed(e.to_string()))
}

fn decompress(body: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    lz4_flex::frame::FrameDecoder::new(body)
        .take(MAX_BODY as u64 * 4)
        .read_to_end(&mut out)
        .map_err(|_| WireError::ChecksumMismatch)?;
    Ok(out)
}

/// Serializes `msg` into a complete frame.
pub fn encode_frame(
    msg: &Message,
    correlation_id: u64,
    compressed: bool,
) -> Result<Vec<u8>, WireError> {
    let raw = msg
        .to_body()
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    let (body, flags) = if compressed {
        (compress(&raw)?, FLAG_COMPRESSED)
    } else {
        (raw, 0)
    };
    if body.len() > MAX_BODY {
        return Err(WireError::BodyTooLarge(body.len()));
    }
    let header = FrameHeader {
        length: body.len() as u32,
        msg_type: msg.msg_type(),
        correlation_id,
        flags,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes the body of a frame whose header has already been parsed.
pub fn decode_body(header: &FrameHeader, body: &[u8]) -> Result<Message, WireError> {
    if !Message::is_known_type(header.msg_type) {
        return Err(WireError::UnknownType(header.msg_type));
    }
    let owned;
    let raw = if header.flags & FLAG_COMPRESSED != 0 {
        owned = decompress(body)?;
        &owned[..]
    } else {
        body
    };
    Message::from_body(header.msg_type, raw).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Decodes one frame from the front of `buf`, returning the correlation id,
/// the message and the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(u64, Message, usize), WireError> {
    let header = FrameHeader::decode(buf)?;
    let len = header.length as usize;
    if len > MAX_BODY {
        return Err(WireError::BodyTooLarge(len));
    }
    let end = HEADER_LEN + len;
    if buf.len() < end {
        return Err(WireError::Truncated);
    }
    let msg = decode_body(&header, &buf[HEADER_LEN..end])?;
    Ok((header.correlation_id, msg, end))
}

/// A frame read off a stream: the header plus either a message or the error
/// decoding its body. Stream-level failures are returned separately.
pub struct RawFrame {
    pub header: FrameHeader,
    pub message: Result<Message, WireError>,
}

/// Reads one full frame. Returns `Ok(None)` on a clean EOF at a frame
/// boundary. Unknown types still consume the body so the stream stays in sync.
pub fn read_frame(r: &mut impl Read) -> Result<Option<RawFrame>, WireError> {
    let mut hbuf = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut hbuf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::ConnectionLost(e.to_string())),
        }
    }
    let header = FrameHeader::decode(&hbuf)?;
    let len = header.length as usize;
    if len > MAX_BODY {
        return Err(WireError::BodyTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::ConnectionLost(e.to_string()),
    })?;
    Ok(Some(RawFrame {
        message: decode_body(&header, &body),
        header,
    }))
}

pub fn write_preamble(w: &mut impl Write) -> std::io::Result<()> {
    let mut p = [0u8; 6];
    p[..4].copy_from_slice(PREAMBLE_MAGIC);
    p[4..].copy_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    w.write_all(&p)?;
    w.flush()
}

pub fn read_preamble(r: &mut impl Read) -> Result<u16, WireError> {
    let mut p = [0u8; 6];
    r.read_exact(&mut p).map_err(|_| WireError::BadPreamble)?;
    if &p[..4] != PREAMBLE_MAGIC {
        return Err(WireError::BadPreamble);
    }
    Ok(u16::from_le_bytes([p[4], p[5]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Batch, Element};
    use crate::wire::message::{ElementResult, TaskReport, TaskState};

    #[test]
    fn heartbeat_round_trip() {
        let msg = Message::Heartbeat {
            worker_id: 7,
            tasks: vec![TaskReport {
                job_id: 3,
                state: TaskState::Running,
            }],
        };
        let frame = encode_frame(&msg, 42, false).unwrap();
        let (cid, back, used) = decode_frame(&frame).unwrap();
        assert_eq!((cid, used), (42, frame.len()));
        assert_eq!(back, msg);
        assert_eq!(&frame[4..6], &crate::wire::message::HEARTBEAT.to_le_bytes());
    }

    #[test]
    fn compressed_one_mib_batch() {
        let payload: Vec<u8> = (0..1 << 20).map(|i: u32| (i % 251) as u8).collect();
        let msg = Message::ElementResult(ElementResult::Batch(Batch::new(vec![Element::new(
            1,
            payload.len() as u32,
            payload,
        )])));
        let frame = encode_frame(&msg, 1, true).unwrap();
        assert!(frame.len() < 1 << 20);
        assert_eq!(
            u16::from_le_bytes([frame[14], frame[15]]) & FLAG_COMPRESSED,
            1
        );
        assert_eq!(decode_frame(&frame).unwrap().1, msg);
    }

    #[test]
    fn oversized_body_rejected() {
        let payload = vec![0u8; 65 * 1024 * 1024];
        let msg = Message::ElementResult(ElementResult::Batch(Batch::new(vec![Element::new(
            1, 1, payload,
        )])));
        assert!(matches!(
            encode_frame(&msg, 1, false),
            Err(WireError::BodyTooLarge(_))
        ));
        let mut h = FrameHeader {
            length: 65 * 1024 * 1024,
            msg_type: crate::wire::message::HEARTBEAT,
            correlation_id: 0,
            flags: 0,
        }
        .encode()
        .to_vec();
        h.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_frame(&h), Err(WireError::BodyTooLarge(_))));
    }

    #[test]
    fn truncated_frame() {
        let frame = encode_frame(&Message::ListTasks { worker_id: 1 }, 9, false).unwrap();
        assert_eq!(decode_frame(&frame[..3]).unwrap_err(), WireError::Truncated);
        assert_eq!(
            decode_frame(&frame[..frame.len() - 1]).unwrap_err(),
            WireError::Truncated
        );
        let mut cursor = std::io::Cursor::new(&frame[..frame.len() - 3]);
        assert!(matches!(read_frame(&mut cursor), Err(WireError::Truncated)));
    }

    #[test]
    fn unknown_type_skips_body_and_resyncs() {
        let mut stream = FrameHeader {
            length: 5,
            msg_type: 0xffff,
            correlation_id: 1,
            flags: 0,
        }
        .encode()
        .to_vec();
        stream.extend_from_slice(b"junk!");
        let good = Message::ListTasks { worker_id: 4 };
        stream.extend(encode_frame(&good, 2, false).unwrap());
        let mut cursor = std::io::Cursor::new(stream);
        let first = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(first.message.unwrap_err(), WireError::UnknownType(0xffff));
        let second = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(second.header.correlation_id, 2);
        assert_eq!(second.message.unwrap(), good);
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn corrupted_compressed_body() {
        let payload = vec![7u8; 4096];
        let msg = Message::ElementResult(ElementResult::Batch(Batch::new(vec![Element::new(
            1, 4096, payload,
        )])));
        let mut frame = encode_frame(&msg, 1, true).unwrap();
        let n = frame.len();
        frame[n - 6] ^= 0x55;
        assert_eq!(
            decode_frame(&frame).unwrap_err(),
            WireError::ChecksumMismatch
        );
    }

    #[test]
    fn preamble() {
        let mut buf = Vec::new();
        write_preamble(&mut buf).unwrap();
        assert_eq!(read_preamble(&mut &buf[..]).unwrap(), PROTOCOL_VERSION);
        assert_eq!(
            read_preamble(&mut &b"HTTP/1"[..]).unwrap_err(),
            WireError::BadPreamble
        );
    }
}
