use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_text, write_file, IoError, ParseError};
use crate::geometry::{CameraModel, RigidTransform};

/// JSON shape of one camera entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub intrinsics: [f64; 9],
    pub ego_from_camera: [f64; 16],
}

impl CameraRecord {
    pub fn to_model(&self) -> Result<CameraModel, ParseError> {
        let k = &self.intrinsics;
        let transform = RigidTransform::from_row_major(&self.ego_from_camera)
            .map_err(|e| ParseError::Calibration(format!("camera `{}`: {e}", self.name)))?;
        CameraModel::new(
            self.name.clone(),
            [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]],
            transform,
            self.width,
            self.height,
        )
        .map_err(|e| ParseError::Calibration(e.to_string()))
    }

    pub fn from_model(camera: &CameraModel) -> Self {
        let k = camera.intrinsics();
        Self {
            name: camera.name().to_string(),
            width: camera.width(),
            height: camera.height(),
            intrinsics: [
                k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2],
            ],
            ego_from_camera: camera.ego_from_camera().to_row_major(),
        }
    }
}

pub fn decode_calibration(text: &str) -> Result<Vec<CameraModel>, ParseError> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| ParseError::Calibration(e.to_string()))?;
    let mut names = std::collections::BTreeSet::new();
    records
        .iter()
        .map(|r| {
            if !names.insert(r.name.as_str()) {
                return Err(ParseError::Calibration(format!(
                    "duplicate camera name `{}`",
                    r.name
                )));
            }
            r.to_model()
        })
        .collect()
}

pub fn encode_calibration(cameras: &[CameraModel]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from_model).collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Vec<CameraModel>, IoError> {
    let path = path.as_ref();
    decode_calibration(&read_text(path)?).map_err(|e| IoError::parse(path, e))
}

pub fn write_calibration(path: impl AsRef<Path>, cameras: &[CameraModel]) -> Result<(), IoError> {
    write_file(path.as_ref(), encode_calibration(cameras).as_bytes())
}
