use std::path::Path;

use super::{read_text, write_file, IoError, ParseError};
use crate::class::ClassId;
use crate::geometry::{Box3D, Point3};

/// Placeholder written in the instance column when a box carries no instance id.
pub const NO_INSTANCE: &str = "-";

const FIELD_COUNT: usize = 11;

/// A box together with the frame it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub frame_id: String,
    pub bbox: Box3D,
}

impl BoxRecord {
    pub fn new(frame_id: impl Into<String>, bbox: Box3D) -> Self {
        Self {
            frame_id: frame_id.into(),
            bbox,
        }
    }
}

/// Parses box lines:
/// `frame_id class_id cx cy cz length width height yaw score instance_id`.
pub fn decode_boxes(text: &str) -> Result<Vec<BoxRecord>, ParseError> {
    let mut records = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != FIELD_COUNT {
            return Err(ParseError::Line {
                line,
                reason: format!("expected {FIELD_COUNT} fields, found {}", fields.len()),
            });
        }
        let class_id: ClassId = fields[1].parse().map_err(|e| ParseError::Line {
            line,
            reason: format!("{e}"),
        })?;
        let mut numbers = [0.0f64; 8];
        for (slot, text) in numbers.iter_mut().zip(&fields[2..10]) {
            *slot = text
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ParseError::Line {
                    line,
                    reason: format!("non-finite or malformed number {text:?}"),
                })?;
        }
        let [cx, cy, cz, length, width, height, yaw, score] = numbers;
        let instance_id = match fields[10] {
            NO_INSTANCE => None,
            other => Some(other.to_string()),
        };
        let bbox = Box3D {
            center: Point3::new(cx, cy, cz),
            length,
            width,
            height,
            yaw,
            class_id,
            score,
            instance_id,
        };
        bbox.validate().map_err(|e| ParseError::Line {
            line,
            reason: e.to_string(),
        })?;
        records.push(BoxRecord {
            frame_id: fields[0].to_string(),
            bbox,
        });
    }
    Ok(records)
}

/// Numbers use the shortest representation that reads back to the same `f64`.
pub fn encode_boxes(records: &[BoxRecord]) -> String {
    let mut out = String::new();
    for BoxRecord { frame_id, bbox: b } in records {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {}\n",
            frame_id,
            b.class_id,
            b.center.x,
            b.center.y,
            b.center.z,
            b.length,
            b.width,
            b.height,
            b.yaw,
            b.score,
            b.instance_id.as_deref().unwrap_or(NO_INSTANCE)
        ));
    }
    out
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoxRecord>, IoError> {
    let path = path.as_ref();
    decode_boxes(&read_text(path)?).map_err(|e| IoError::parse(path, e))
}

pub fn write_boxes(path: impl AsRef<Path>, records: &[BoxRecord]) -> Result<(), IoError> {
    write_file(path.as_ref(), encode_boxes(records).as_bytes())
}
