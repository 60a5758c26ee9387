//! Bi-directional LiDAR–camera fusion.
//!
//! Real points pick up class and instance labels from the mask pixel they
//! project onto; mask pixels are lifted into pseudo points through the depth
//! raster. Both kinds are then grouped per instance, keyed by
//! `(camera name, instance id)`.

use std::collections::BTreeMap;
use std::fmt;

use crate::class::ClassId;
use crate::geometry::Point3;
use crate::io::Frame;

/// Pseudo points kept per instance unless configured otherwise.
pub const DEFAULT_MAX_PER_INSTANCE: usize = 4096;

/// Scales need at least this many LiDAR anchors; otherwise they stay 1.
pub const MIN_SCALE_ANCHORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Real,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceKey {
    pub camera: String,
    pub id: u16,
}

impl InstanceKey {
    pub fn new(camera: impl Into<String>, id: u16) -> Self {
        Self {
            camera: camera.into(),
            id,
        }
    }
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.camera, self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub position: Point3,
    pub class_id: ClassId,
    pub instance: InstanceKey,
    pub origin: Origin,
}

/// Real (`R`) and pseudo (`V`) foreground points of one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCloud {
    pub key: InstanceKey,
    pub class_id: ClassId,
    pub real: Vec<LabeledPoint>,
    pub pseudo: Vec<LabeledPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealLabeling {
    pub foreground: Vec<LabeledPoint>,
    pub background: usize,
}

/// Per-instance multipliers applied to depth-raster values.
pub type DepthScales = BTreeMap<InstanceKey, f64>;

/// Labels every LiDAR point from the instance masks.
///
/// A point seen on foreground pixels by several cameras takes the label of the
/// camera whose principal axis is closest in angle to the ray towards the
/// point (ties go to the camera listed first). Points on background pixels or
/// outside every image are only counted.
pub fn label_real_points(frame: &Frame) -> RealLabeling {
    let mut labeling = RealLabeling::default();
    for raw in &frame.points {
        let p = raw.position();
        let mut best: Option<(f64, usize, u16)> = None;
        for (index, view) in frame.cameras.iter().enumerate() {
            let Some(proj) = view.camera.project(p) else {
                continue;
            };
            let (col, row) = proj.pixel(view.camera.width(), view.camera.height());
            let id = view.mask.get(col, row);
            if id == 0 {
                continue;
            }
            let angle = view.camera.ray_angle(p);
            if best.is_none_or(|(a, _, _)| angle < a) {
                best = Some((angle, index, id));
            }
        }
        match best {
            Some((_, index, id)) => {
                let view = &frame.cameras[index];
                let class_id = view
                    .mask
                    .class_of(id)
                    .expect("mask ids are validated against the class table");
                labeling.foreground.push(LabeledPoint {
                    position: p,
                    class_id,
                    instance: InstanceKey::new(view.camera.name(), id),
                    origin: Origin::Real,
                });
            }
            None => labeling.background += 1,
        }
    }
    labeling
}

/// Ratio of LiDAR planar depth to raster depth, per instance, as the median over
/// anchor pixels. Instances with fewer than [`MIN_SCALE_ANCHORS`] anchors get 1.
pub fn align_depth_scale(frame: &Frame) -> DepthScales {
    let mut ratios: BTreeMap<InstanceKey, Vec<f64>> = BTreeMap::new();
    for view in &frame.cameras {
        for &id in view.mask.class_table().keys() {
            ratios
                .entry(InstanceKey::new(view.camera.name(), id))
                .or_default();
        }
        for raw in &frame.points {
            let Some(proj) = view.camera.project(raw.position()) else {
                continue;
            };
            let (col, row) = proj.pixel(view.camera.width(), view.camera.height());
            let id = view.mask.get(col, row);
            if id == 0 {
                continue;
            }
            if let Some(d) = view.depth.valid(col, row) {
                ratios
                    .entry(InstanceKey::new(view.camera.name(), id))
                    .or_default()
                    .push(proj.depth / f64::from(d));
            }
        }
    }
    ratios
        .into_iter()
        .map(|(key, mut r)| {
            let scale = if r.len() < MIN_SCALE_ANCHORS {
                1.0
            } else {
                median(&mut r)
            };
            (key, scale)
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Positions `⌊i·n/keep⌋` for `i < keep`: an even stride through `n` items.
pub fn stride_subsample(n: usize, keep: usize) -> Vec<usize> {
    if n <= keep {
        return (0..n).collect();
    }
    (0..keep)
        .map(|i| (i as u128 * n as u128 / keep as u128) as usize)
        .collect()
}

/// Back-projects every foreground pixel with valid depth.
///
/// Pixel `(col, row)` is lifted from image coordinates `(col, row)`. Instances
/// with more than `max_per_instance` such pixels are thinned by
/// [`stride_subsample`] over their row-major pixel order. Output order is
/// camera, then instance id, then row-major pixel order.
pub fn generate_pseudo_points(
    frame: &Frame,
    max_per_instance: usize,
    scales: Option<&DepthScales>,
) -> Vec<LabeledPoint> {
    let mut out = Vec::new();
    for view in &frame.cameras {
        let width = view.camera.width() as usize;
        let mut pixels: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (index, (&id, &d)) in view
            .mask
            .values()
            .iter()
            .zip(view.depth.values())
            .enumerate()
        {
            if id != 0 && d.is_finite() && d > 0.0 {
                pixels.entry(id).or_default().push(index);
            }
        }
        for (id, indices) in pixels {
            let key = InstanceKey::new(view.camera.name(), id);
            let scale = scales.and_then(|s| s.get(&key)).copied().unwrap_or(1.0);
            let class_id = view
                .mask
                .class_of(id)
                .expect("mask ids are validated against the class table");
            for pick in stride_subsample(indices.len(), max_per_instance) {
                let index = indices[pick];
                let (col, row) = ((index % width) as u32, (index / width) as u32);
                let depth = f64::from(view.depth.get(col, row)) * scale;
                let Ok(position) = view
                    .camera
                    .backproject(f64::from(col), f64::from(row), depth)
                else {
                    continue;
                };
                out.push(LabeledPoint {
                    position,
                    class_id,
                    instance: key.clone(),
                    origin: Origin::Pseudo,
                });
            }
        }
    }
    out
}

/// Partitions labeled points by instance, ordered by camera name then id.
pub fn group_by_instance(real: &[LabeledPoint], pseudo: &[LabeledPoint]) -> Vec<InstanceCloud> {
    let mut clouds: BTreeMap<InstanceKey, InstanceCloud> = BTreeMap::new();
    for point in real.iter().chain(pseudo) {
        let cloud = clouds
            .entry(point.instance.clone())
            .or_insert_with(|| InstanceCloud {
                key: point.instance.clone(),
                class_id: point.class_id,
                real: Vec::new(),
                pseudo: Vec::new(),
            });
        match point.origin {
            Origin::Real => cloud.real.push(point.clone()),
            Origin::Pseudo => cloud.pseudo.push(point.clone()),
        }
    }
    clouds.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub max_per_instance: usize,
    /// Rescale depth rasters per instance against LiDAR before lifting pixels.
    pub align_depth: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            max_per_instance: DEFAULT_MAX_PER_INSTANCE,
            align_depth: false,
        }
    }
}

/// Everything fusion produces for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    pub labeling: RealLabeling,
    pub pseudo: Vec<LabeledPoint>,
    pub scales: Option<DepthScales>,
    pub clouds: Vec<InstanceCloud>,
}

pub fn fuse_frame(frame: &Frame, params: &FusionParams) -> FusedFrame {
    let labeling = label_real_points(frame);
    let scales = params.align_depth.then(|| align_depth_scale(frame));
    let pseudo = generate_pseudo_points(frame, params.max_per_instance, scales.as_ref());
    let clouds = group_by_instance(&labeling.foreground, &pseudo);
    FusedFrame {
        labeling,
        pseudo,
        scales,
        clouds,
    }
}
