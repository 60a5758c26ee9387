use std::collections::BTreeMap;
use std::path::Path;

use super::{header_tokens, read_bytes, read_text, write_file, IoError, ParseError};
use crate::class::ClassId;

/// Per-pixel instance ids (0 = background) with their classes.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    values: Vec<u16>,
    class_table: BTreeMap<u16, ClassId>,
}

impl InstanceMask {
    /// Fails if a nonzero id in `values` has no class, or the raster size is wrong.
    pub fn new(
        width: u32,
        height: u32,
        values: Vec<u16>,
        class_table: BTreeMap<u16, ClassId>,
    ) -> Result<Self, ParseError> {
        if values.len() != width as usize * height as usize {
            return Err(ParseError::Dimensions(format!(
                "{} mask values for a {width}x{height} raster",
                values.len()
            )));
        }
        if let Some(&missing) = values
            .iter()
            .find(|&&id| id != 0 && !class_table.contains_key(&id))
        {
            return Err(ParseError::MissingClass(missing));
        }
        Ok(Self {
            width,
            height,
            values,
            class_table,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn class_table(&self) -> &BTreeMap<u16, ClassId> {
        &self.class_table
    }

    pub fn get(&self, col: u32, row: u32) -> u16 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn class_of(&self, id: u16) -> Option<ClassId> {
        self.class_table.get(&id).copied()
    }

    /// Pixel count of every instance present in the raster.
    pub fn instance_pixel_counts(&self) -> BTreeMap<u16, usize> {
        let mut counts = BTreeMap::new();
        for &id in self.values.iter().filter(|&&id| id != 0) {
            *counts.entry(id).or_insert(0) += 1;
        }
        counts
    }
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(u32, u32, Vec<u16>), ParseError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ParseError::BadMagic {
            expected: "P5".into(),
            found,
        });
    }
    let (tokens, end) = header_tokens(bytes, 4)?;
    let number = |i: usize| -> Result<u32, ParseError> {
        let (offset, ref text) = tokens[i];
        text.parse::<u32>().map_err(|_| ParseError::Header {
            offset,
            reason: format!("expected an unsigned integer, found {text:?}"),
        })
    };
    let (width, height, maxval) = (number(1)?, number(2)?, number(3)?);
    if maxval != 65535 {
        return Err(ParseError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ParseError::Header {
            offset: tokens[1].0,
            reason: "zero image dimension".into(),
        });
    }
    if end >= bytes.len() || !bytes[end].is_ascii_whitespace() {
        return Err(ParseError::Header {
            offset: end,
            reason: "missing whitespace after maxval".into(),
        });
    }
    let data = &bytes[end + 1..];
    let needed = width as usize * height as usize * 2;
    if data.len() < needed {
        return Err(ParseError::Truncated {
            offset: end + 1 + data.len(),
            needed: needed - data.len(),
            available: 0,
        });
    }
    if data.len() > needed {
        return Err(ParseError::CountMismatch {
            offset: end + 1 + needed,
            declared: needed / 2,
            found: data.len() / 2,
        });
    }
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, values))
}

pub fn encode_pgm16(width: u32, height: u32, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Parses `<instance_id> <class_id>` lines. Blank lines and `#` comments are skipped.
pub fn decode_class_table(text: &str) -> Result<BTreeMap<u16, ClassId>, ParseError> {
    let mut table = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(ParseError::Line {
                line,
                reason: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let id: u16 = fields[0].parse().map_err(|_| ParseError::Line {
            line,
            reason: format!("bad instance id {:?}", fields[0]),
        })?;
        if id == 0 {
            return Err(ParseError::Line {
                line,
                reason: "instance id 0 is reserved for background".into(),
            });
        }
        let class: ClassId = fields[1].parse().map_err(|e| ParseError::Line {
            line,
            reason: format!("{e}"),
        })?;
        if table.insert(id, class).is_some() {
            return Err(ParseError::DuplicateInstance { line, id });
        }
    }
    Ok(table)
}

pub fn encode_class_table(table: &BTreeMap<u16, ClassId>) -> String {
    table
        .iter()
        .map(|(id, class)| format!("{id} {class}\n"))
        .collect()
}

pub fn load_mask(
    mask_path: impl AsRef<Path>,
    table_path: impl AsRef<Path>,
) -> Result<InstanceMask, IoError> {
    let (mask_path, table_path) = (mask_path.as_ref(), table_path.as_ref());
    let (width, height, values) =
        decode_pgm16(&read_bytes(mask_path)?).map_err(|e| IoError::parse(mask_path, e))?;
    let table =
        decode_class_table(&read_text(table_path)?).map_err(|e| IoError::parse(table_path, e))?;
    InstanceMask::new(width, height, values, table).map_err(|e| IoError::parse(mask_path, e))
}

pub fn write_mask(
    mask_path: impl AsRef<Path>,
    table_path: impl AsRef<Path>,
    mask: &InstanceMask,
) -> Result<(), IoError> {
    write_file(
        mask_path.as_ref(),
        &encode_pgm16(mask.width, mask.height, &mask.values),
    )?;
    write_file(
        table_path.as_ref(),
        encode_class_table(&mask.class_table).as_bytes(),
    )
}
