//! Synthetic scenes: box-shaped objects on a ground plane, rendered into a
//! spinning LiDAR sweep and a ring of pinhole cameras (instance masks and
//! planar depth), with ground-truth boxes and per-object visibility.
//!
//! Randomly placed objects sit wholly inside one camera's view and outside
//! every other camera's, so each object yields exactly one instance.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fusebox_core::geometry::{
    bev_intersection_area, BevBox, Box3D, CameraModel, Point3, RigidTransform,
};
use fusebox_core::io::{
    write_boxes, write_frame, BoxRecord, CameraView, DepthMap, Frame, InstanceMask, RawPoint,
};
use fusebox_core::ClassId;

use crate::CliError;

pub const TRUTH_DIR: &str = "truth";
pub const SCENE_FILE: &str = "scene.json";

/// Ground height in the ego frame (sensor at the origin).
pub const GROUND_Z: f64 = -1.8;

/// Camera names and headings in degrees, counter-clockwise from forward.
pub const CAMERAS: [(&str, f64); 6] = [
    ("CAM_FRONT", 0.0),
    ("CAM_FRONT_LEFT", 60.0),
    ("CAM_BACK_LEFT", 120.0),
    ("CAM_BACK", 180.0),
    ("CAM_BACK_RIGHT", -120.0),
    ("CAM_FRONT_RIGHT", -60.0),
];

const CAMERA_FORWARD_OFFSET: f64 = 0.3;
/// Cameras share the LiDAR's height so neither sensor sees over an object the
/// other cannot.
const CAMERA_HEIGHT: f64 = 0.0;
/// Angular margin kept between an object and the edges of its camera's view.
const ZONE_MARGIN_DEG: f64 = 2.0;
/// Minimum free space between object footprints.
const CLEARANCE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Probability of losing each LiDAR return.
    pub lidar_dropout: f64,
    /// Range noise of LiDAR returns, metres.
    pub lidar_sigma: f64,
    /// Multiplicative depth-raster noise (0.02 = 2% of range).
    pub depth_sigma: f64,
    /// Background pixels bordering each instance relabeled as that instance,
    /// as a fraction of its pixel count.
    pub mask_bleed: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            lidar_dropout: 0.1,
            lidar_sigma: 0.01,
            depth_sigma: 0.0,
            mask_bleed: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub beams: u32,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    /// Keep returns from the ground plane; off, the sweep sees only objects.
    pub ground_returns: bool,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            beams: 64,
            min_elevation_deg: -25.0,
            max_elevation_deg: 3.0,
            azimuth_step_deg: 0.2,
            max_range: 100.0,
            ground_returns: false,
        }
    }
}

/// An explicitly placed object resting on the ground. Missing dimensions take
/// the class's typical size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class_id: ClassId,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
    pub length: Option<f64>,
    pub width: Option<f64>,
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    /// Placed in every frame before the random objects.
    pub objects: Vec<ObjectSpec>,
    pub min_range: f64,
    pub max_range: f64,
    /// Largest share of an object's horizontal angular extent, seen from its
    /// camera, that another object may cover.
    pub max_angular_overlap: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub horizontal_fov_deg: f64,
    pub noise: NoiseSpec,
    pub lidar: LidarSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 1,
            vehicles: 0,
            pedestrians: 0,
            cyclists: 0,
            objects: Vec::new(),
            min_range: 6.0,
            max_range: 45.0,
            max_angular_overlap: 0.5,
            image_width: 800,
            image_height: 450,
            horizontal_fov_deg: 66.0,
            noise: NoiseSpec::default(),
            lidar: LidarSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Input(format!("invalid scene spec: {m}")));
        if !(self.min_range > 0.0 && self.min_range < self.max_range) {
            return fail("need 0 < min_range < max_range");
        }
        if !(0.0..=1.0).contains(&self.max_angular_overlap) {
            return fail("max_angular_overlap must lie in [0, 1]");
        }
        if self.image_width < 2 || self.image_height < 2 {
            return fail("image must be at least 2x2");
        }
        if !(self.horizontal_fov_deg > 2.0 * ZONE_MARGIN_DEG && self.horizontal_fov_deg < 170.0) {
            return fail("horizontal_fov_deg out of range");
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.lidar_dropout)
            || n.lidar_sigma < 0.0
            || n.depth_sigma < 0.0
            || n.mask_bleed < 0.0
        {
            return fail("noise levels must be non-negative and dropout below 1");
        }
        if self.lidar.beams < 2 || self.lidar.azimuth_step_deg <= 0.0 {
            return fail("lidar needs at least 2 beams and a positive azimuth step");
        }
        if self.objects.len() + self.vehicles + self.pedestrians + self.cyclists
            > usize::from(u16::MAX)
        {
            return fail("too many objects");
        }
        Ok(())
    }
}

/// Per-object facts recorded next to the truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub frame_id: String,
    pub instance: String,
    pub class_id: ClassId,
    pub camera: String,
    pub mask_pixels: usize,
    /// Visible pixels over the pixels the object would cover alone.
    pub visibility: f64,
    pub lidar_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub seed: u64,
    pub objects: Vec<ObjectReport>,
}

/// The camera rig used by every synthetic scene.
pub fn camera_rig(width: u32, height: u32, hfov_deg: f64) -> Vec<CameraModel> {
    let cx = f64::from(width - 1) / 2.0;
    let cy = f64::from(height - 1) / 2.0;
    let f = f64::from(width) / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
    CAMERAS
        .iter()
        .map(|&(name, heading)| {
            let (s, c) = heading.to_radians().sin_cos();
            let pose = RigidTransform {
                rotation: [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]],
                translation: Point3::new(
                    CAMERA_FORWARD_OFFSET * c,
                    CAMERA_FORWARD_OFFSET * s,
                    CAMERA_HEIGHT,
                ),
            };
            CameraModel::pinhole(name, f, f, cx, cy, pose, width, height)
                .expect("rig cameras are valid")
        })
        .collect()
}

fn typical_size(class: ClassId) -> [f64; 3] {
    match class {
        ClassId::PEDESTRIAN => [0.7, 0.6, 1.7],
        ClassId::CYCLIST => [1.8, 0.6, 1.7],
        _ => [4.5, 1.9, 1.6],
    }
}

fn random_size(class: ClassId, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        ClassId::PEDESTRIAN => {
            let l = rng.random_range(0.6..0.8);
            [
                l,
                rng.random_range(0.5..l.min(0.7)),
                rng.random_range(1.5..1.9),
            ]
        }
        ClassId::CYCLIST => [
            rng.random_range(1.6..1.9),
            rng.random_range(0.5..0.7),
            rng.random_range(1.5..1.8),
        ],
        _ => [
            rng.random_range(3.9..4.9),
            rng.random_range(1.7..2.0),
            rng.random_range(1.4..1.8),
        ],
    }
}

fn grounded(class: ClassId, x: f64, y: f64, yaw: f64, [l, w, h]: [f64; 3]) -> Box3D {
    Box3D::from_bev(BevBox::new(x, y, l, w, yaw), GROUND_Z + h / 2.0, h, class)
}

fn box_corners(b: &Box3D) -> Vec<Point3> {
    b.bev()
        .corners()
        .iter()
        .flat_map(|c| {
            [
                Point3::new(c[0], c[1], b.bottom()),
                Point3::new(c[0], c[1], b.top()),
            ]
        })
        .collect()
}

/// Horizontal angle of `p` off the camera's optical axis, if in front of it.
fn horizontal_angle(cam: &CameraModel, p: Point3) -> Option<f64> {
    let pc = cam.to_camera(p);
    (pc.z > 0.0).then(|| pc.x.atan2(pc.z))
}

/// True when the box lies wholly inside camera `home` (with margin) and
/// wholly outside every other camera.
fn in_exclusive_zone(b: &Box3D, rig: &[CameraModel], home: usize, half_fov: f64) -> bool {
    let corners = box_corners(b);
    let margin = ZONE_MARGIN_DEG.to_radians();
    rig.iter().enumerate().all(|(k, cam)| {
        if k == home {
            corners.iter().all(|&p| {
                horizontal_angle(cam, p).is_some_and(|a| a.abs() <= half_fov - margin)
                    && cam
                        .project(p)
                        .is_some_and(|px| px.v >= 1.0 && px.v <= f64::from(cam.height()) - 2.0)
            })
        } else {
            corners.iter().all(|&p| {
                horizontal_angle(cam, p).is_none_or(|a| a.abs() >= half_fov + margin / 2.0)
            })
        }
    })
}

fn clear_of(b: &Box3D, placed: &[Placed]) -> bool {
    let bev = b.bev();
    let inflated = BevBox::new(
        bev.cx,
        bev.cy,
        bev.length + 2.0 * CLEARANCE,
        bev.width + 2.0 * CLEARANCE,
        bev.yaw,
    );
    placed
        .iter()
        .all(|o| bev_intersection_area(&inflated, &o.bbox.bev()) == 0.0)
}

/// Horizontal angular interval a box covers from the camera.
fn angular_extent(cam: &CameraModel, b: &Box3D) -> (f64, f64) {
    box_corners(b)
        .iter()
        .filter_map(|&p| horizontal_angle(cam, p))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
            (lo.min(a), hi.max(a))
        })
}

fn overlap_ok(
    cam: &CameraModel,
    b: &Box3D,
    home: usize,
    placed: &[Placed],
    max_overlap: f64,
) -> bool {
    let (lo, hi) = angular_extent(cam, b);
    placed.iter().filter(|o| o.camera == home).all(|o| {
        let (olo, ohi) = angular_extent(cam, &o.bbox);
        let shared = (hi.min(ohi) - lo.max(olo)).max(0.0);
        shared <= max_overlap * (hi - lo).min(ohi - olo)
    })
}

/// An object and the camera whose zone it was placed in.
struct Placed {
    bbox: Box3D,
    camera: usize,
}

fn place_objects(
    spec: &SceneSpec,
    rig: &[CameraModel],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placed>, CliError> {
    let mut placed: Vec<Placed> = spec
        .objects
        .iter()
        .map(|o| {
            let t = typical_size(o.class_id);
            let size = [
                o.length.unwrap_or(t[0]),
                o.width.unwrap_or(t[1]),
                o.height.unwrap_or(t[2]),
            ];
            let bbox = grounded(o.class_id, o.x, o.y, o.yaw, size);
            // Explicit objects belong to the camera facing them most directly.
            let centre = bbox.center;
            let camera = (0..rig.len())
                .min_by(|&a, &b| {
                    rig[a]
                        .ray_angle(centre)
                        .total_cmp(&rig[b].ray_angle(centre))
                })
                .unwrap_or(0);
            Placed { bbox, camera }
        })
        .collect();
    let classes = std::iter::repeat_n(ClassId::VEHICLE, spec.vehicles)
        .chain(std::iter::repeat_n(ClassId::PEDESTRIAN, spec.pedestrians))
        .chain(std::iter::repeat_n(ClassId::CYCLIST, spec.cyclists));
    let half_fov = spec.horizontal_fov_deg.to_radians() / 2.0;
    for class in classes {
        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let home = rng.random_range(0..rig.len());
            let size = random_size(class, rng);
            let yaw = rng.random_range(-PI..PI);
            let range = rng.random_range(spec.min_range..spec.max_range);
            let offset = rng.random_range(-half_fov..half_fov);
            let azimuth = CAMERAS[home].1.to_radians() + offset;
            let candidate = grounded(
                class,
                range * azimuth.cos(),
                range * azimuth.sin(),
                yaw,
                size,
            );
            if in_exclusive_zone(&candidate, rig, home, half_fov)
                && clear_of(&candidate, &placed)
                && overlap_ok(
                    &rig[home],
                    &candidate,
                    home,
                    &placed,
                    spec.max_angular_overlap,
                )
            {
                placed.push(Placed {
                    bbox: candidate,
                    camera: home,
                });
                done = true;
                break;
            }
        }
        if !done {
            return Err(CliError::Input(format!(
                "could not place a class {class} object; scene too crowded"
            )));
        }
    }
    Ok(placed)
}

/// Entry distance of the ray `origin + t * dir` into the box, for `t > 0`.
fn ray_box(origin: Point3, dir: Point3, b: &Box3D) -> Option<f64> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [dir.x * c + dir.y * s, -dir.x * s + dir.y * c, dir.z];
    let o = [o.x, o.y, o.z];
    let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if o[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let t1 = (-half[axis] - o[axis]) / d[axis];
        let t2 = (half[axis] - o[axis]) / d[axis];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    (near <= far && near > 0.0).then_some(near)
}

fn ray_ground(origin: Point3, dir: Point3) -> Option<f64> {
    (dir.z < 0.0).then(|| (GROUND_Z - origin.z) / dir.z)
}

enum Hit {
    Object(usize, f64),
    Ground(f64),
    Nothing,
}

/// Nearest surface along a ray, plus every object the ray passes through.
fn cast(origin: Point3, dir: Point3, boxes: &[Box3D], crossed: &mut Vec<usize>) -> Hit {
    crossed.clear();
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, b) {
            crossed.push(i);
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    match (best, ray_ground(origin, dir)) {
        (Some((i, t)), g) if g.is_none_or(|g| t <= g) => Hit::Object(i, t),
        (_, Some(g)) => Hit::Ground(g),
        _ => Hit::Nothing,
    }
}

struct Render {
    mask: Vec<u16>,
    depth: Vec<f32>,
    /// Pixels each object would cover with nothing in front of it.
    unoccluded: Vec<usize>,
}

fn render_camera(cam: &CameraModel, boxes: &[Box3D]) -> Render {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let k = cam.intrinsics();
    let pose = cam.ego_from_camera();
    let origin = cam.center();
    let rows: Vec<(Vec<u16>, Vec<f32>, Vec<usize>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut mask = vec![0u16; w];
            let mut depth = vec![f32::NAN; w];
            let mut unoccluded = vec![0usize; boxes.len()];
            let mut crossed = Vec::new();
            for col in 0..w {
                // Camera-frame ray with unit z, so the hit distance is planar depth.
                let y = (row as f64 - k[1][2]) / k[1][1];
                let x = (col as f64 - k[0][2] - k[0][1] * y) / k[0][0];
                let dir = pose.rotate(Point3::new(x, y, 1.0));
                match cast(origin, dir, boxes, &mut crossed) {
                    Hit::Object(i, t) => {
                        mask[col] = i as u16 + 1;
                        depth[col] = t as f32;
                    }
                    Hit::Ground(t) => depth[col] = t as f32,
                    Hit::Nothing => {}
                }
                for &i in &crossed {
                    unoccluded[i] += 1;
                }
            }
            (mask, depth, unoccluded)
        })
        .collect();
    let mut render = Render {
        mask: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        unoccluded: vec![0; boxes.len()],
    };
    for (mask, depth, unoccluded) in rows {
        render.mask.extend(mask);
        render.depth.extend(depth);
        for (total, n) in render.unoccluded.iter_mut().zip(unoccluded) {
            *total += n;
        }
    }
    render
}

/// Relabels background pixels on each instance's border as that instance.
fn bleed_mask(mask: &mut [u16], width: usize, fraction: f64, rng: &mut ChaCha8Rng) {
    if fraction <= 0.0 {
        return;
    }
    let height = mask.len() / width;
    let original = mask.to_vec();
    let mut pixels: BTreeMap<u16, usize> = BTreeMap::new();
    let mut rings: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (index, &id) in original.iter().enumerate() {
        if id != 0 {
            *pixels.entry(id).or_default() += 1;
            continue;
        }
        let (col, row) = (index % width, index / width);
        let neighbours = [
            (col > 0).then(|| index - 1),
            (col + 1 < width).then(|| index + 1),
            (row > 0).then(|| index - width),
            (row + 1 < height).then(|| index + width),
        ];
        let mut adjacent: Vec<u16> = neighbours
            .iter()
            .flatten()
            .map(|&n| original[n])
            .filter(|&v| v != 0)
            .collect();
        adjacent.sort_unstable();
        adjacent.dedup();
        for id in adjacent {
            rings.entry(id).or_default().push(index);
        }
    }
    for (id, mut ring) in rings {
        let count = ((pixels[&id] as f64 * fraction).round() as usize).min(ring.len());
        for k in 0..count {
            let pick = rng.random_range(k..ring.len());
            ring.swap(k, pick);
        }
        for &index in &ring[..count] {
            if mask[index] == 0 {
                mask[index] = id;
            }
        }
    }
}

fn add_depth_noise(depth: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    for d in depth.iter_mut().filter(|d| d.is_finite()) {
        let n: f64 = rng.sample(StandardNormal);
        *d = (f64::from(*d) * (1.0 + sigma * n)).max(1e-3) as f32;
    }
}

const OBJECT_INTENSITY: f32 = 0.8;
const GROUND_INTENSITY: f32 = 0.1;

fn lidar_sweep(
    spec: &LidarSpec,
    noise: &NoiseSpec,
    boxes: &[Box3D],
    rng: &mut ChaCha8Rng,
) -> (Vec<RawPoint>, Vec<usize>) {
    let steps = (360.0 / spec.azimuth_step_deg).round() as u32;
    let mut points = Vec::new();
    let mut hits = vec![0usize; boxes.len()];
    let mut crossed = Vec::new();
    for beam in 0..spec.beams {
        let t = f64::from(beam) / f64::from(spec.beams - 1);
        let elevation = (spec.min_elevation_deg
            + t * (spec.max_elevation_deg - spec.min_elevation_deg))
            .to_radians();
        for step in 0..steps {
            let azimuth = (f64::from(step) * spec.azimuth_step_deg).to_radians();
            let dir = Point3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let (range, intensity, object) = match cast(Point3::ORIGIN, dir, boxes, &mut crossed) {
                Hit::Object(i, r) => (r, OBJECT_INTENSITY, Some(i)),
                Hit::Ground(r) if spec.ground_returns => (r, GROUND_INTENSITY, None),
                Hit::Ground(_) => continue,
                Hit::Nothing => continue,
            };
            if range > spec.max_range || rng.random::<f64>() < noise.lidar_dropout {
                continue;
            }
            let n: f64 = rng.sample(StandardNormal);
            let r = range + noise.lidar_sigma * n;
            if let Some(i) = object {
                hits[i] += 1;
            }
            points.push(RawPoint::new(
                (dir.x * r) as f32,
                (dir.y * r) as f32,
                (dir.z * r) as f32,
                intensity,
            ));
        }
    }
    (points, hits)
}

/// Stream ids separating the random draws of each frame and purpose.
fn rng_for(seed: u64, frame: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 * 64 + purpose);
    rng
}

/// A rendered frame, its truth boxes and per-object facts.
pub struct SyntheticFrame {
    pub frame: Frame,
    pub truth: Vec<Box3D>,
    pub objects: Vec<ObjectReport>,
}

pub fn synthesize_frame(
    spec: &SceneSpec,
    seed: u64,
    index: usize,
) -> Result<SyntheticFrame, CliError> {
    spec.validate()?;
    let frame_id = format!("frame_{index:03}");
    let rig = camera_rig(spec.image_width, spec.image_height, spec.horizontal_fov_deg);
    let placed = place_objects(spec, &rig, &mut rng_for(seed, index, 0))?;
    let boxes: Vec<Box3D> = placed.iter().map(|p| p.bbox.clone()).collect();
    let table: BTreeMap<u16, ClassId> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| (i as u16 + 1, b.class_id))
        .collect();
    let mut views = Vec::with_capacity(rig.len());
    let mut visible = vec![vec![0usize; boxes.len()]; rig.len()];
    let mut alone = vec![0usize; boxes.len()];
    for (k, cam) in rig.iter().enumerate() {
        let mut render = render_camera(cam, &boxes);
        for &id in render.mask.iter().filter(|&&id| id != 0) {
            visible[k][usize::from(id) - 1] += 1;
        }
        for (total, n) in alone.iter_mut().zip(&render.unoccluded) {
            *total += n;
        }
        bleed_mask(
            &mut render.mask,
            cam.width() as usize,
            spec.noise.mask_bleed,
            &mut rng_for(seed, index, 1 + k as u64),
        );
        add_depth_noise(
            &mut render.depth,
            spec.noise.depth_sigma,
            &mut rng_for(seed, index, 16 + k as u64),
        );
        let mask = InstanceMask::new(cam.width(), cam.height(), render.mask, table.clone())
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let depth = DepthMap::new(cam.width(), cam.height(), render.depth)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        views.push(
            CameraView::new(cam.clone(), mask, depth)
                .map_err(|e| CliError::Internal(e.to_string()))?,
        );
    }
    let (points, lidar_hits) = lidar_sweep(
        &spec.lidar,
        &spec.noise,
        &boxes,
        &mut rng_for(seed, index, 63),
    );
    let mut truth = Vec::with_capacity(boxes.len());
    let mut objects = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let home = placed[i].camera;
        let instance = format!("{}:{}", rig[home].name(), i + 1);
        let seen: usize = visible.iter().map(|v| v[i]).sum();
        truth.push(b.clone().with_instance(instance.clone()));
        objects.push(ObjectReport {
            frame_id: frame_id.clone(),
            instance,
            class_id: b.class_id,
            camera: rig[home].name().to_string(),
            mask_pixels: visible[home][i],
            visibility: if alone[i] == 0 {
                0.0
            } else {
                seen as f64 / alone[i] as f64
            },
            lidar_points: lidar_hits[i],
        });
    }
    let frame = Frame {
        frame_id,
        timestamp_us: index as i64 * 100_000,
        points,
        cameras: views,
    };
    Ok(SyntheticFrame {
        frame,
        truth,
        objects,
    })
}

/// Writes `<out>/<frame_id>/` frame directories, `<out>/truth/<frame_id>.txt`
/// and `<out>/scene.json`. Output is a pure function of `seed` and `spec`.
pub fn cmd_synth(seed: u64, spec: &SceneSpec, out: &Path) -> Result<SceneReport, CliError> {
    spec.validate()?;
    let truth_dir = out.join(TRUTH_DIR);
    std::fs::create_dir_all(&truth_dir)
        .map_err(|e| CliError::Internal(format!("{}: {e}", truth_dir.display())))?;
    let mut report = SceneReport {
        seed,
        objects: Vec::new(),
    };
    for index in 0..spec.frames {
        let synthetic = synthesize_frame(spec, seed, index)?;
        let id = synthetic.frame.frame_id.clone();
        write_frame(out.join(&id), &synthetic.frame)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let records: Vec<BoxRecord> = synthetic
            .truth
            .into_iter()
            .map(|b| BoxRecord::new(id.clone(), b))
            .collect();
        write_boxes(truth_dir.join(format!("{id}.txt")), &records)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        report.objects.extend(synthetic.objects);
    }
    let path = out.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    std::fs::write(&path, json)
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    Ok(report)
}
