//! `generate` and `evolve` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fusebox_core::boxfit::{generate_initial_boxes, FitQuality, SizePriors};
use fusebox_core::evolution::{
    run_evolution, DetectorError, EvolutionError, FileDetector, FrameState,
};
use fusebox_core::fusion::fuse_frame;
use fusebox_core::geometry::{Box3D, Point3};
use fusebox_core::io::{
    load_frame, read_boxes, write_boxes, BoxRecord, Frame, IoError, POINTS_FILE,
};

use crate::config::PipelineConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BOXES_DIR: &str = "boxes";
pub const PHASE_LOG_FILE: &str = "phase_log.txt";

/// Point counts through each stage for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub frame_id: String,
    pub lidar_points: usize,
    pub foreground_points: usize,
    pub background_points: usize,
    pub pseudo_points: usize,
    pub instances: usize,
    pub after_local: usize,
    pub after_global: usize,
    pub unanchored: usize,
    pub boxes: usize,
    pub fallback_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub frames: Vec<FrameCounts>,
}

/// Frame directories under `root`, sorted by name. A directory counts as a
/// frame when it holds a point cloud.
pub fn discover_frames(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        std::fs::read_dir(root).map_err(|e| CliError::Input(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(POINTS_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn frame_name(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn load(dir: &Path) -> Result<Frame, CliError> {
    load_frame(dir).map_err(|source: IoError| CliError::Frame {
        frame: frame_name(dir),
        source,
    })
}

fn box_file(out: &Path, frame_id: &str) -> PathBuf {
    out.join(BOXES_DIR).join(format!("{frame_id}.txt"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))
}

fn write_records(path: &Path, records: &[BoxRecord]) -> Result<(), CliError> {
    write_boxes(path, records).map_err(|e| CliError::Internal(e.to_string()))
}

fn generate_frame(
    dir: &Path,
    config: &PipelineConfig,
    priors: &SizePriors,
) -> Result<(Vec<BoxRecord>, FrameCounts), CliError> {
    let frame = load(dir)?;
    let fused = fuse_frame(&frame, &config.fusion_params());
    let generation = generate_initial_boxes(&fused.clouds, &config.generation_params(), priors)
        .map_err(|e| CliError::Input(format!("frame {}: {e}", frame.frame_id)))?;
    let counts = FrameCounts {
        frame_id: frame.frame_id.clone(),
        lidar_points: frame.points.len(),
        foreground_points: fused.labeling.foreground.len(),
        background_points: fused.labeling.background,
        pseudo_points: fused.pseudo.len(),
        instances: fused.clouds.len(),
        after_local: generation.instances.iter().map(|i| i.after_local).sum(),
        after_global: generation.instances.iter().map(|i| i.after_global).sum(),
        unanchored: generation.instances.iter().filter(|i| !i.anchored).count(),
        boxes: generation.boxes.len(),
        fallback_boxes: generation
            .instances
            .iter()
            .filter(|i| i.fit == Some(FitQuality::Fallback))
            .count(),
    };
    let records = generation
        .boxes
        .into_iter()
        .map(|b| BoxRecord::new(frame.frame_id.clone(), b))
        .collect();
    Ok((records, counts))
}

/// Writes `<out>/boxes/<frame_id>.txt` for every frame and `<out>/manifest.json`.
pub fn cmd_generate(
    config: &PipelineConfig,
    frames: &[PathBuf],
    out: &Path,
) -> Result<Manifest, CliError> {
    config.validate()?;
    let priors = config.size_priors()?;
    let results: Vec<_> = config.thread_pool()?.install(|| {
        frames
            .par_iter()
            .map(|dir| generate_frame(dir, config, &priors))
            .collect()
    });
    let mut per_frame = Vec::with_capacity(results.len());
    for result in results {
        per_frame.push(result?);
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some((_, c)) = per_frame
        .iter()
        .find(|(_, c)| !seen.insert(c.frame_id.clone()))
    {
        return Err(CliError::Input(format!(
            "duplicate frame id {}",
            c.frame_id
        )));
    }
    create_dir(&out.join(BOXES_DIR))?;
    let mut manifest = Manifest {
        config_hash: config.hash(),
        frames: Vec::new(),
    };
    for (records, counts) in per_frame {
        write_records(&box_file(out, &counts.frame_id), &records)?;
        log::info!("frame {}: {} boxes", counts.frame_id, counts.boxes);
        manifest.frames.push(counts);
    }
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, json).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// Box records from every file in `dir`, grouped by frame id.
pub fn read_box_dir(dir: &Path) -> Result<BTreeMap<String, Vec<Box3D>>, CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut grouped: BTreeMap<String, Vec<Box3D>> = BTreeMap::new();
    for file in files {
        for record in read_boxes(&file).map_err(|e| CliError::Input(e.to_string()))? {
            grouped
                .entry(record.frame_id)
                .or_default()
                .push(record.bbox);
        }
    }
    Ok(grouped)
}

fn frame_state(
    dir: &Path,
    config: &PipelineConfig,
) -> Result<(String, Vec<Point3>, Vec<Point3>), CliError> {
    let frame = load(dir)?;
    let fused = fuse_frame(&frame, &config.fusion_params());
    let real = frame.points.iter().map(|p| p.position()).collect();
    let pool = fused.pseudo.iter().map(|p| p.position).collect();
    Ok((frame.frame_id, real, pool))
}

/// Refines pseudo-boxes with a replayed detector.
///
/// `frames` supplies the points used for densification; without it frames
/// carry no points. Writes `<out>/boxes/<frame_id>.txt` and
/// `<out>/phase_log.txt`; the log is written even when the detector fails.
pub fn cmd_evolve(
    config: &PipelineConfig,
    frames: &[PathBuf],
    boxes_dir: &Path,
    detector_dir: &Path,
    out: &Path,
) -> Result<String, CliError> {
    config.validate()?;
    let mut boxes = read_box_dir(boxes_dir)?;
    let detector = FileDetector::open(detector_dir).map_err(detector_error)?;
    let loaded: Vec<_> = config.thread_pool()?.install(|| {
        frames
            .par_iter()
            .map(|dir| frame_state(dir, config))
            .collect()
    });
    let mut states = Vec::new();
    for result in loaded {
        let (frame_id, real, pseudo_pool) = result?;
        let boxes = boxes.remove(&frame_id).unwrap_or_default();
        states.push(FrameState {
            frame_id,
            real,
            pseudo_pool,
            boxes,
        });
    }
    states.extend(
        std::mem::take(&mut boxes)
            .into_iter()
            .map(|(frame_id, boxes)| FrameState {
                frame_id,
                real: vec![],
                pseudo_pool: vec![],
                boxes,
            }),
    );
    states.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    create_dir(&out.join(BOXES_DIR))?;
    let log_path = out.join(PHASE_LOG_FILE);
    let write_log = |text: String| {
        std::fs::write(&log_path, text)
            .map_err(|e| CliError::Internal(format!("{}: {e}", log_path.display())))
    };
    let pool = config.thread_pool()?;
    let result = match pool.install(|| run_evolution(states, &detector, config.evolution_config()))
    {
        Ok(result) => result,
        Err(EvolutionError::Detector { source, log, epoch }) => {
            write_log(log.to_string())?;
            return Err(match source {
                DetectorError::Failed(msg) => {
                    CliError::Internal(format!("detector failed at epoch {epoch}: {msg}"))
                }
                other => detector_error(other),
            });
        }
        Err(e) => return Err(CliError::Input(e.to_string())),
    };
    for frame in &result.frames {
        let records: Vec<BoxRecord> = frame
            .boxes
            .iter()
            .map(|b| BoxRecord::new(frame.frame_id.clone(), b.clone()))
            .collect();
        write_records(&box_file(out, &frame.frame_id), &records)?;
    }
    let log = result.log.to_string();
    write_log(log.clone())?;
    Ok(log)
}

fn detector_error(e: DetectorError) -> CliError {
    match e {
        DetectorError::Failed(msg) => CliError::Internal(msg),
        other => CliError::Input(other.to_string()),
    }
}
