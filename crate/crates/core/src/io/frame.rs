use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_calibration, load_depth, load_mask, load_point_cloud, read_text, write_calibration,
    write_depth, write_file, write_mask, write_point_cloud, DepthMap, InstanceMask, IoError,
    ParseError, RawPoint,
};
use crate::geometry::CameraModel;

pub const POINTS_FILE: &str = "points.pcbf";
pub const CALIBRATION_FILE: &str = "calib.json";
pub const META_FILE: &str = "frame.json";

/// A camera with its instance mask and depth raster.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub camera: CameraModel,
    pub mask: InstanceMask,
    pub depth: DepthMap,
}

impl CameraView {
    pub fn new(
        camera: CameraModel,
        mask: InstanceMask,
        depth: DepthMap,
    ) -> Result<Self, ParseError> {
        let size = (camera.width(), camera.height());
        if (mask.width(), mask.height()) != size || (depth.width(), depth.height()) != size {
            return Err(ParseError::Dimensions(format!(
                "camera `{}` is {}x{} but mask is {}x{} and depth is {}x{}",
                camera.name(),
                size.0,
                size.1,
                mask.width(),
                mask.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(Self {
            camera,
            mask,
            depth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: String,
    #[serde(default)]
    pub timestamp_us: i64,
}

/// One LiDAR sweep with its synchronized camera views.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub timestamp_us: i64,
    pub points: Vec<RawPoint>,
    pub cameras: Vec<CameraView>,
}

fn mask_file(camera: &str) -> String {
    format!("{camera}.mask.pgm")
}

fn table_file(camera: &str) -> String {
    format!("{camera}.classes.txt")
}

fn depth_file(camera: &str) -> String {
    format!("{camera}.depth.pfm")
}

/// Loads a frame directory:
///
/// ```text
/// <dir>/frame.json               {"frame_id": ..., "timestamp_us": ...}  (optional)
/// <dir>/points.pcbf
/// <dir>/calib.json
/// <dir>/<camera>.mask.pgm
/// <dir>/<camera>.classes.txt
/// <dir>/<camera>.depth.pfm
/// ```
///
/// Without `frame.json` the directory name is the frame id.
pub fn load_frame(dir: impl AsRef<Path>) -> Result<Frame, IoError> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        serde_json::from_str::<FrameMeta>(&read_text(&meta_path)?).map_err(|e| {
            IoError::parse(
                &meta_path,
                ParseError::Header {
                    offset: 0,
                    reason: e.to_string(),
                },
            )
        })?
    } else {
        FrameMeta {
            frame_id: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            timestamp_us: 0,
        }
    };
    if meta.frame_id.is_empty() || meta.frame_id.contains(char::is_whitespace) {
        return Err(IoError::parse(
            &meta_path,
            ParseError::Header {
                offset: 0,
                reason: format!("invalid frame id {:?}", meta.frame_id),
            },
        ));
    }
    let points = load_point_cloud(dir.join(POINTS_FILE))?;
    let models = load_calibration(dir.join(CALIBRATION_FILE))?;
    let mut cameras = Vec::with_capacity(models.len());
    for camera in models {
        let mask_path = dir.join(mask_file(camera.name()));
        let mask = load_mask(&mask_path, dir.join(table_file(camera.name())))?;
        let depth = load_depth(dir.join(depth_file(camera.name())))?;
        cameras
            .push(CameraView::new(camera, mask, depth).map_err(|e| IoError::parse(&mask_path, e))?);
    }
    Ok(Frame {
        frame_id: meta.frame_id,
        timestamp_us: meta.timestamp_us,
        points,
        cameras,
    })
}

pub fn write_frame(dir: impl AsRef<Path>, frame: &Frame) -> Result<(), IoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = FrameMeta {
        frame_id: frame.frame_id.clone(),
        timestamp_us: frame.timestamp_us,
    };
    write_file(
        &dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)
            .expect("meta serializes")
            .as_bytes(),
    )?;
    write_point_cloud(dir.join(POINTS_FILE), &frame.points)?;
    let models: Vec<CameraModel> = frame.cameras.iter().map(|v| v.camera.clone()).collect();
    write_calibration(dir.join(CALIBRATION_FILE), &models)?;
    for view in &frame.cameras {
        let name = view.camera.name();
        write_mask(
            dir.join(mask_file(name)),
            dir.join(table_file(name)),
            &view.mask,
        )?;
        write_depth(dir.join(depth_file(name)), &view.depth)?;
    }
    Ok(())
}
