//! Version-2 message framing: a 58-byte big-endian header followed by a
//! CRC-protected body. TRANSFORM and STATUS bodies are decoded; any other
//! type is passed through untouched.

use std::io::Read;

use thiserror::Error;

use crate::crc::crc64;

pub const HEADER_SIZE: usize = 58;
pub const VERSION: u16 = 2;
pub const TYPE_NAME_LEN: usize = 12;
pub const DEVICE_NAME_LEN: usize = 20;
pub const TRANSFORM_BODY_SIZE: usize = 48;
/// STATUS body bytes before the free-text message.
pub const STATUS_FIXED_SIZE: usize = 30;
pub const ERROR_NAME_LEN: usize = 20;
/// Bodies larger than this are refused before any allocation.
pub const MAX_BODY_SIZE: u64 = 1 << 20;
/// Rotation columns must be orthonormal to this tolerance (float32 data).
pub const ORTHO_TOL: f32 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("need {needed} bytes, have {got}")]
    ShortRead { needed: usize, got: usize },
    #[error("CRC mismatch: header says {expected:#018x}, body hashes to {actual:#018x}")]
    CrcMismatch { expected: u64, actual: u64 },
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("body of {0} bytes exceeds the 1 MiB limit")]
    BodyTooLarge(u64),
    #[error("name {0:?} must be printable ASCII and fit the field")]
    BadName(String),
    #[error("malformed {kind} body: {reason}")]
    BadBody { kind: &'static str, reason: String },
    #[error("I/O: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

/// 32-bit seconds plus a 32-bit binary fraction of a second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Timestamp {
    pub seconds: u32,
    pub fraction: u32,
}

impl Timestamp {
    pub fn from_secs_f64(t: f64) -> Self {
        let t = t.max(0.0);
        let mut seconds = t.floor().min(u32::MAX as f64) as u32;
        let mut frac = ((t - seconds as f64) * 4_294_967_296.0).round();
        if frac >= 4_294_967_296.0 {
            // rounding carried into the next second
            seconds = seconds.saturating_add(1);
            frac = 0.0;
        }
        Self { seconds, fraction: frac as u32 }
    }

    pub fn as_secs_f64(self) -> f64 {
        self.seconds as f64 + self.fraction as f64 / 4_294_967_296.0
    }

    pub fn to_bits(self) -> u64 {
        ((self.seconds as u64) << 32) | self.fraction as u64
    }

    pub fn from_bits(v: u64) -> Self {
        Self { seconds: (v >> 32) as u32, fraction: v as u32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    pub version: u16,
    pub type_name: String,
    pub device_name: String,
    pub timestamp: Timestamp,
    pub body_size: u64,
    pub body_crc: u64,
}

fn check_name(name: &str, len: usize) -> Result<(), ProtocolError> {
    if name.len() > len || !name.bytes().all(|b| (0x20..0x7f).contains(&b)) {
        return Err(ProtocolError::BadName(name.to_string()));
    }
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str, len: usize) {
    out.extend_from_slice(name.as_bytes());
    out.resize(out.len() + len - name.len(), 0);
}

fn get_name(field: &[u8]) -> Result<String, ProtocolError> {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    let s = std::str::from_utf8(&field[..end]).map_err(|_| ProtocolError::BadName(format!("{field:?}")))?;
    check_name(s, field.len())?;
    Ok(s.to_string())
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b[..8].try_into().expect("8 bytes"))
}

impl MessageHeader {
    pub fn encode(&self) -> Result<[u8; HEADER_SIZE], ProtocolError> {
        check_name(&self.type_name, TYPE_NAME_LEN)?;
        check_name(&self.device_name, DEVICE_NAME_LEN)?;
        let mut out = Vec::with_capacity(HEADER_SIZE);
        out.extend_from_slice(&self.version.to_be_bytes());
        put_name(&mut out, &self.type_name, TYPE_NAME_LEN);
        put_name(&mut out, &self.device_name, DEVICE_NAME_LEN);
        out.extend_from_slice(&self.timestamp.to_bits().to_be_bytes());
        out.extend_from_slice(&self.body_size.to_be_bytes());
        out.extend_from_slice(&self.body_crc.to_be_bytes());
        Ok(out.try_into().expect("58-byte header"))
    }

    /// Parses and checks version and size limit; the CRC is checked against the body later.
    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < HEADER_SIZE {
            return Err(ProtocolError::ShortRead { needed: HEADER_SIZE, got: bytes.len() });
        }
        let version = u16::from_be_bytes([bytes[0], bytes[1]]);
        if version != VERSION {
            return Err(ProtocolError::Version(version));
        }
        let body_size = be_u64(&bytes[42..50]);
        if body_size > MAX_BODY_SIZE {
            return Err(ProtocolError::BodyTooLarge(body_size));
        }
        Ok(Self {
            version,
            type_name: get_name(&bytes[2..14])?,
            device_name: get_name(&bytes[14..34])?,
            timestamp: Timestamp::from_bits(be_u64(&bytes[34..42])),
            body_size,
            body_crc: be_u64(&bytes[50..58]),
        })
    }
}

/// Pose as a 3×4 matrix: rows `[r0 r1 r2 t]`, rotation in the left 3×3 block.
pub type Matrix34 = [[f32; 4]; 3];

pub const IDENTITY: Matrix34 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];

#[derive(Debug, Clone, PartialEq)]
pub struct TransformMessage {
    pub device: String,
    pub timestamp: Timestamp,
    pub matrix: Matrix34,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusMessage {
    pub device: String,
    pub timestamp: Timestamp,
    pub code: u16,
    pub subcode: i64,
    pub error_name: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnknownMessage {
    pub header: MessageHeader,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Transform(TransformMessage),
    Status(StatusMessage),
    Unknown(UnknownMessage),
}

pub fn is_orthonormal(m: &Matrix34) -> bool {
    for a in 0..3 {
        for b in 0..3 {
            let dot: f32 = (0..3).map(|r| m[r][a] * m[r][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > ORTHO_TOL {
                return false;
            }
        }
    }
    true
}

fn frame(type_name: &str, device: &str, timestamp: Timestamp, body: Vec<u8>) -> Result<Vec<u8>, ProtocolError> {
    let header = MessageHeader {
        version: VERSION,
        type_name: type_name.to_string(),
        device_name: device.to_string(),
        timestamp,
        body_size: body.len() as u64,
        body_crc: crc64(&body),
    };
    let mut out = header.encode()?.to_vec();
    out.extend_from_slice(&body);
    Ok(out)
}

/// 106-byte TRANSFORM message; the body is the 12 floats column by column
/// (rotation columns, then translation).
pub fn encode_transform(device: &str, timestamp: f64, matrix: &Matrix34) -> Result<Vec<u8>, ProtocolError> {
    encode_transform_at(device, Timestamp::from_secs_f64(timestamp), matrix)
}

pub fn encode_transform_at(device: &str, timestamp: Timestamp, matrix: &Matrix34) -> Result<Vec<u8>, ProtocolError> {
    let mut body = Vec::with_capacity(TRANSFORM_BODY_SIZE);
    for col in 0..4 {
        for row in matrix {
            body.extend_from_slice(&row[col].to_be_bytes());
        }
    }
    frame("TRANSFORM", device, timestamp, body)
}

pub fn encode_status(msg: &StatusMessage) -> Result<Vec<u8>, ProtocolError> {
    check_name(&msg.error_name, ERROR_NAME_LEN)?;
    if !msg.message.is_ascii() {
        return Err(ProtocolError::BadName(msg.message.clone()));
    }
    let mut body = Vec::with_capacity(STATUS_FIXED_SIZE + msg.message.len());
    body.extend_from_slice(&msg.code.to_be_bytes());
    body.extend_from_slice(&msg.subcode.to_be_bytes());
    put_name(&mut body, &msg.error_name, ERROR_NAME_LEN);
    body.extend_from_slice(msg.message.as_bytes());
    frame("STATUS", &msg.device, msg.timestamp, body)
}

fn decode_body(header: MessageHeader, body: &[u8]) -> Result<Message, ProtocolError> {
    match header.type_name.as_str() {
        "TRANSFORM" => {
            if body.len() != TRANSFORM_BODY_SIZE {
                return Err(ProtocolError::BadBody { kind: "TRANSFORM", reason: format!("{} bytes, need 48", body.len()) });
            }
            let mut matrix = [[0f32; 4]; 3];
            for (n, chunk) in body.chunks_exact(4).enumerate() {
                matrix[n % 3][n / 3] = f32::from_be_bytes(chunk.try_into().expect("4 bytes"));
            }
            if !matrix.iter().flatten().all(|v| v.is_finite()) || !is_orthonormal(&matrix) {
                return Err(ProtocolError::BadBody { kind: "TRANSFORM", reason: "rotation is not orthonormal".into() });
            }
            Ok(Message::Transform(TransformMessage { device: header.device_name, timestamp: header.timestamp, matrix }))
        }
        "STATUS" => {
            if body.len() < STATUS_FIXED_SIZE {
                return Err(ProtocolError::BadBody { kind: "STATUS", reason: format!("{} bytes, need >= 30", body.len()) });
            }
            let message = std::str::from_utf8(&body[STATUS_FIXED_SIZE..])
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or_else(|| ProtocolError::BadBody { kind: "STATUS", reason: "message is not ASCII".into() })?;
            Ok(Message::Status(StatusMessage {
                device: header.device_name,
                timestamp: header.timestamp,
                code: u16::from_be_bytes([body[0], body[1]]),
                subcode: i64::from_be_bytes(body[2..10].try_into().expect("8 bytes")),
                error_name: get_name(&body[10..30])?,
                message: message.to_string(),
            }))
        }
        _ => Ok(Message::Unknown(UnknownMessage { header, body: body.to_vec() })),
    }
}

/// Decodes the first complete message in `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    let header = MessageHeader::decode(bytes)?;
    let total = HEADER_SIZE + header.body_size as usize;
    if bytes.len() < total {
        return Err(ProtocolError::ShortRead { needed: total, got: bytes.len() });
    }
    let body = &bytes[HEADER_SIZE..total];
    let actual = crc64(body);
    if actual != header.body_crc {
        return Err(ProtocolError::CrcMismatch { expected: header.body_crc, actual });
    }
    Ok((decode_body(header, body)?, total))
}

/// Decodes exactly one message; trailing bytes are an error.
pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::BadBody { kind: "frame", reason: format!("{} trailing bytes", bytes.len() - used) });
    }
    Ok(msg)
}

/// Blocking read of one message from a stream.
pub fn read_message(r: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut head = [0u8; HEADER_SIZE];
    r.read_exact(&mut head)?;
    let header = MessageHeader::decode(&head)?;
    let mut frame = head.to_vec();
    frame.resize(HEADER_SIZE + header.body_size as usize, 0);
    r.read_exact(&mut frame[HEADER_SIZE..])?;
    decode_message(&frame)
}
