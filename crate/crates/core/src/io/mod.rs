//! On-disk formats for pipeline inputs and outputs.
//!
//! | data            | format                                                    |
//! |-----------------|-----------------------------------------------------------|
//! | point cloud     | PCBF: `b"PCBF"`, u32 LE count, count × 4 f32 LE (x y z i) |
//! | instance mask   | 16-bit binary PGM (`P5`, maxval 65535) + class table text |
//! | depth           | single-channel PFM (`Pf`), bottom-up rows                 |
//! | calibration     | JSON array of cameras                                     |
//! | boxes           | one whitespace-separated record per line                  |
//! | loss trace      | CSV `epoch,loss`                                          |
//!
//! Byte-level decoders work on slices and report [`ParseError`]s with byte
//! offsets or line numbers; the path-based loaders wrap them in [`IoError`].

mod boxes;
mod calibration;
mod depth;
mod frame;
mod loss;
mod mask;
mod pcbf;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use boxes::{decode_boxes, encode_boxes, read_boxes, write_boxes, BoxRecord, NO_INSTANCE};
pub use calibration::{
    decode_calibration, encode_calibration, load_calibration, write_calibration, CameraRecord,
};
pub use depth::{decode_pfm, encode_pfm, load_depth, write_depth, DepthMap};
pub use frame::{
    load_frame, write_frame, CameraView, Frame, FrameMeta, CALIBRATION_FILE, META_FILE, POINTS_FILE,
};
pub use loss::{
    decode_loss_trace, encode_loss_trace, load_loss_trace, write_loss_trace, LossTrace,
};
pub use mask::{
    decode_class_table, decode_pgm16, encode_class_table, encode_pgm16, load_mask, write_mask,
    InstanceMask,
};
pub use pcbf::{
    decode_pcbf, encode_pcbf, load_point_cloud, write_point_cloud, RawPoint, PCBF_MAGIC,
};

/// Format-level decoding failure.
#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated data at byte {offset}: needed {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error(
        "record count mismatch at byte {offset}: header declares {declared}, payload holds {found}"
    )]
    CountMismatch {
        offset: usize,
        declared: usize,
        found: usize,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("unsupported PGM maxval {0}, only 65535 is accepted")]
    UnsupportedMaxval(u32),
    #[error("instance id {0} appears in the raster but not in the class table")]
    MissingClass(u16),
    #[error("line {line}: duplicate instance id {id} in class table")]
    DuplicateInstance { line: usize, id: u16 },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: ParseError },
}

impl IoError {
    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Parse { path, .. } => path,
        }
    }

    pub(crate) fn parse(path: &Path, source: ParseError) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Whitespace-separated header tokens in the netpbm style, with `#` comments.
/// Returns the tokens and the offset just past the last one.
pub(crate) fn header_tokens(
    bytes: &[u8],
    count: usize,
) -> Result<(Vec<(usize, String)>, usize), ParseError> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        if pos >= bytes.len() {
            return Err(ParseError::Truncated {
                offset: pos,
                needed: 1,
                available: 0,
            });
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let token = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        tokens.push((start, token));
    }
    Ok((tokens, pos))
}
