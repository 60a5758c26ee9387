use std::path::Path;

use super::{read_bytes, write_file, IoError, ParseError};
use crate::geometry::Point3;

pub const PCBF_MAGIC: &[u8; 4] = b"PCBF";
const HEADER_LEN: usize = 8;
const RECORD_LEN: usize = 16;

/// One LiDAR return as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl RawPoint {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(f64::from(self.x), f64::from(self.y), f64::from(self.z))
    }
}

pub fn decode_pcbf(bytes: &[u8]) -> Result<Vec<RawPoint>, ParseError> {
    if bytes.len() < 4 || &bytes[..4] != PCBF_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(ParseError::BadMagic {
            expected: "PCBF".into(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(ParseError::Truncated {
            offset: 4,
            needed: HEADER_LEN - 4,
            available: bytes.len() - 4,
        });
    }
    let declared = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let whole = payload.len() / RECORD_LEN;
    let partial = payload.len() % RECORD_LEN;
    if partial != 0 && whole < declared {
        let offset = HEADER_LEN + whole * RECORD_LEN;
        return Err(ParseError::Truncated {
            offset,
            needed: RECORD_LEN,
            available: partial,
        });
    }
    if whole != declared || partial != 0 {
        let offset = HEADER_LEN + whole.min(declared) * RECORD_LEN;
        return Err(ParseError::CountMismatch {
            offset,
            declared,
            found: if partial == 0 { whole } else { whole + 1 },
        });
    }
    let field =
        |chunk: &[u8], i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
    Ok(payload
        .chunks_exact(RECORD_LEN)
        .map(|c| RawPoint::new(field(c, 0), field(c, 1), field(c, 2), field(c, 3)))
        .collect())
}

pub fn encode_pcbf(points: &[RawPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + points.len() * RECORD_LEN);
    out.extend_from_slice(PCBF_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<Vec<RawPoint>, IoError> {
    let path = path.as_ref();
    decode_pcbf(&read_bytes(path)?).map_err(|e| IoError::parse(path, e))
}

pub fn write_point_cloud(path: impl AsRef<Path>, points: &[RawPoint]) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode_pcbf(points))
}
