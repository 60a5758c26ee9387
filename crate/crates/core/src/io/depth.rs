use std::path::Path;

use super::{header_tokens, read_bytes, write_file, IoError, ParseError};

/// Planar depth in metres, rows stored top-down. Values `> 0` and finite are valid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, ParseError> {
        if values.len() != width as usize * height as usize {
            return Err(ParseError::Dimensions(format!(
                "{} depth values for a {width}x{height} raster",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, col: u32, row: u32) -> f32 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    /// Depth at a pixel if it is valid.
    pub fn valid(&self, col: u32, row: u32) -> Option<f32> {
        let d = self.get(col, row);
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap, ParseError> {
    if bytes.len() < 2 || &bytes[..2] != b"Pf" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ParseError::BadMagic {
            expected: "Pf".into(),
            found,
        });
    }
    let (tokens, end) = header_tokens(bytes, 4)?;
    if tokens[0].1 != "Pf" {
        return Err(ParseError::BadMagic {
            expected: "Pf".into(),
            found: tokens[0].1.clone(),
        });
    }
    let dim = |i: usize| -> Result<u32, ParseError> {
        let (offset, ref text) = tokens[i];
        match text.parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(ParseError::Header {
                offset,
                reason: format!("bad dimension {text:?}"),
            }),
        }
    };
    let (width, height) = (dim(1)?, dim(2)?);
    let (scale_offset, ref scale_text) = tokens[3];
    let scale: f64 = scale_text
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| ParseError::Header {
            offset: scale_offset,
            reason: format!("bad scale {scale_text:?}"),
        })?;
    if end >= bytes.len() || !bytes[end].is_ascii_whitespace() {
        return Err(ParseError::Header {
            offset: end,
            reason: "missing whitespace after scale".into(),
        });
    }
    let little_endian = scale < 0.0;
    let data_start = end + 1;
    let data = &bytes[data_start..];
    let count = width as usize * height as usize;
    if data.len() < count * 4 {
        return Err(ParseError::Truncated {
            offset: data_start + data.len(),
            needed: count * 4 - data.len(),
            available: 0,
        });
    }
    if data.len() != count * 4 {
        return Err(ParseError::CountMismatch {
            offset: data_start + count * 4,
            declared: count,
            found: data.len() / 4,
        });
    }
    let decode = |c: &[u8]| {
        let raw = [c[0], c[1], c[2], c[3]];
        if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        }
    };
    let row_len = width as usize;
    let mut values = Vec::with_capacity(count);
    for row in (0..height as usize).rev() {
        let start = row * row_len * 4;
        values.extend(data[start..start + row_len * 4].chunks_exact(4).map(decode));
    }
    DepthMap::new(width, height, values)
}

/// Little-endian (`scale = -1`) PFM with bottom-up rows.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.values.len() * 4);
    for row in depth.values.chunks_exact(depth.width as usize).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap, IoError> {
    let path = path.as_ref();
    decode_pfm(&read_bytes(path)?).map_err(|e| IoError::parse(path, e))
}

pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode_pfm(depth))
}
