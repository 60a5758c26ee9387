//! Points, pinhole cameras, oriented boxes and their overlap measures.
//!
//! Frames follow the usual LiDAR convention: x forward, y left, z up, with the
//! sensor at the origin. Camera frames are x right, y down, z forward. Yaw is
//! measured counterclockwise about +z from the +x axis.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

use crate::class::ClassId;

/// Slivers of BEV intersection below this area count as no overlap.
pub const AREA_EPSILON: f64 = 1e-12;

/// Boundary slack used by [`points_in_box`].
pub const CONTAINMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid camera `{name}`: {reason}")]
    InvalidCamera { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn distance_squared(self, other: Point3) -> f64 {
        (self - other).norm_squared()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Range in the ground plane.
    pub fn bev_range(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Self { x, y, z }
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle - TAU * ((angle + PI) / TAU).floor();
    if wrapped >= PI {
        wrapped - TAU
    } else if wrapped < -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// A rotation plus translation, `p_out = R p_in + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: Point3::ORIGIN,
    };

    /// Rotation about +z by `yaw` followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Point3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Parses a row-major 4×4 homogeneous matrix. The bottom row must be `0 0 0 1`.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidArgument(
                "non-finite transform entry".into(),
            ));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(GeometryError::InvalidArgument(
                "transform bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        Ok(Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: Point3::new(m[3], m[7], m[11]),
        })
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1],
            r[2][2], t.z, 0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Largest deviation of `RᵀR` from the identity, and `det R`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expected).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (worst, det)
    }

    pub fn rotate(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        )
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        self.rotate(p) + self.translation
    }

    /// `Rᵀ (p − t)`; valid because the rotation is orthonormal.
    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        let d = p - self.translation;
        let r = &self.rotation;
        Point3::new(
            r[0][0] * d.x + r[1][0] * d.y + r[2][0] * d.z,
            r[0][1] * d.x + r[1][1] * d.y + r[2][1] * d.z,
            r[0][2] * d.x + r[1][2] * d.y + r[2][2] * d.z,
        )
    }
}

/// Pixel position plus planar (camera-z) depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelProjection {
    /// Nearest pixel under the convention that pixel `(i, j)` is centred at `(i, j)`.
    /// Coordinates in the last half pixel of the image clamp onto the border pixel.
    pub fn pixel(&self, width: u32, height: u32) -> (u32, u32) {
        let col = ((self.u + 0.5).floor().max(0.0) as u32).min(width - 1);
        let row = ((self.v + 0.5).floor().max(0.0) as u32).min(height - 1);
        (col, row)
    }
}

/// Validated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    name: String,
    intrinsics: [[f64; 3]; 3],
    ego_from_camera: RigidTransform,
    width: u32,
    height: u32,
}

/// Rotation part of `ego_from_camera` may deviate from orthonormal by at most this much.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

impl CameraModel {
    pub fn new(
        name: impl Into<String>,
        intrinsics: [[f64; 3]; 3],
        ego_from_camera: RigidTransform,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let name = name.into();
        let fail = |reason: String| GeometryError::InvalidCamera {
            name: name.clone(),
            reason,
        };
        let k = &intrinsics;
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite intrinsics".into()));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(fail(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if width < 1 || height < 1 {
            return Err(fail(format!(
                "image size {width}x{height} must be at least 1x1"
            )));
        }
        let (fx, fy, cx, cy) = (k[0][0], k[1][1], k[0][2], k[1][2]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(fail(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx > 0.0 && cx < f64::from(width) && cy > 0.0 && cy < f64::from(height)) {
            return Err(fail(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        let (err, det) = ego_from_camera.orthonormality_error();
        if err > ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(fail(format!(
                "rotation is not orthonormal (|RᵀR − I| = {err:.3e}, det = {det:.9})"
            )));
        }
        if !ego_from_camera.translation.is_finite() {
            return Err(fail("non-finite translation".into()));
        }
        Ok(Self {
            name,
            intrinsics,
            ego_from_camera,
            width,
            height,
        })
    }

    /// Camera with zero skew.
    #[allow(clippy::too_many_arguments)]
    pub fn pinhole(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        ego_from_camera: RigidTransform,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::new(
            name,
            [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            ego_from_camera,
            width,
            height,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn ego_from_camera(&self) -> &RigidTransform {
        &self.ego_from_camera
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Optical centre in the ego frame.
    pub fn center(&self) -> Point3 {
        self.ego_from_camera.translation
    }

    /// Unit principal axis (camera +z) in the ego frame.
    pub fn principal_axis(&self) -> Point3 {
        self.ego_from_camera.rotate(Point3::new(0.0, 0.0, 1.0))
    }

    /// Angle between the principal axis and the ray from the optical centre to `p`.
    pub fn ray_angle(&self, p: Point3) -> f64 {
        let ray = p - self.center();
        let n = ray.norm();
        if n == 0.0 {
            return PI;
        }
        (self.principal_axis().dot(ray) / n).clamp(-1.0, 1.0).acos()
    }

    pub fn to_camera(&self, p: Point3) -> Point3 {
        self.ego_from_camera.apply_inverse(p)
    }

    /// Projects a camera-frame point, ignoring image bounds. `None` when not in front.
    pub fn project_camera_point(&self, pc: Point3) -> Option<PixelProjection> {
        if pc.z.is_nan() || pc.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * pc.x + k[0][1] * pc.y) / pc.z + k[0][2];
        let v = k[1][1] * pc.y / pc.z + k[1][2];
        Some(PixelProjection { u, v, depth: pc.z })
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < f64::from(self.width) && v >= 0.0 && v < f64::from(self.height)
    }

    /// Pixel and planar depth of an ego-frame point, if it is in front of the
    /// camera and inside the image.
    pub fn project(&self, p: Point3) -> Option<PixelProjection> {
        self.project_camera_point(self.to_camera(p))
            .filter(|proj| self.in_image(proj.u, proj.v))
    }

    /// Camera-frame point at planar depth `depth` behind pixel `(u, v)`.
    pub fn backproject_camera(&self, u: f64, v: f64, depth: f64) -> Result<Point3, GeometryError> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(GeometryError::InvalidArgument(format!(
                "depth must be positive and finite, got {depth}"
            )));
        }
        let k = &self.intrinsics;
        let y = (v - k[1][2]) * depth / k[1][1];
        let x = ((u - k[0][2]) * depth - k[0][1] * y) / k[0][0];
        Ok(Point3::new(x, y, depth))
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3, GeometryError> {
        Ok(self
            .ego_from_camera
            .apply(self.backproject_camera(u, v, depth)?))
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project_to_image(p: Point3, cam: &CameraModel) -> Option<PixelProjection> {
    cam.project(p)
}

/// Free-function form of [`CameraModel::backproject`].
pub fn backproject(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Point3, GeometryError> {
    cam.backproject(u, v, depth)
}

/// Oriented rectangle in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl BevBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            length,
            width,
            yaw,
        }
        .canonical()
    }

    /// Normal form: `length ≥ width`, yaw in `[-π, π)`.
    pub fn canonical(self) -> Self {
        let (length, width, yaw) = if self.width > self.length {
            (self.width, self.length, self.yaw + PI / 2.0)
        } else {
            (self.length, self.width, self.yaw)
        };
        Self {
            length,
            width,
            yaw: normalize_angle(yaw),
            ..self
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Unit heading and its left normal.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.yaw.sin_cos();
        ([c, s], [-s, c])
    }

    /// Corners in counterclockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let ([hx, hy], [nx, ny]) = self.axes();
        let (dl, dw) = (self.length / 2.0, self.width / 2.0);
        let at = |a: f64, b: f64| [self.cx + a * hx + b * nx, self.cy + a * hy + b * ny];
        [at(dl, dw), at(-dl, dw), at(-dl, -dw), at(dl, -dw)]
    }

    /// Coordinates of `(x, y)` along the heading and its normal, relative to the centre.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let ([hx, hy], [nx, ny]) = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * hx + dy * hy, dx * nx + dy * ny)
    }

    pub fn contains(&self, x: f64, y: f64, tolerance: f64) -> bool {
        let (a, b) = self.to_local(x, y);
        a.abs() <= self.length / 2.0 + tolerance && b.abs() <= self.width / 2.0 + tolerance
    }

    fn same_footprint(&self, other: &BevBox) -> bool {
        if self.cx != other.cx || self.cy != other.cy {
            return false;
        }
        let half_turn = |a: f64, b: f64| {
            let d = normalize_angle(a - b);
            d == 0.0 || d == -PI
        };
        (self.length == other.length && self.width == other.width && half_turn(self.yaw, other.yaw))
            || (self.length == other.width
                && self.width == other.length
                && self.length == self.width
                && half_turn(self.yaw - PI / 2.0, other.yaw))
    }
}

/// Yaw-oriented 3D box.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub class_id: ClassId,
    pub score: f64,
    pub instance_id: Option<String>,
}

impl Box3D {
    pub fn from_bev(bev: BevBox, z_center: f64, height: f64, class_id: ClassId) -> Self {
        let bev = bev.canonical();
        Self {
            center: Point3::new(bev.cx, bev.cy, z_center),
            length: bev.length,
            width: bev.width,
            height,
            yaw: bev.yaw,
            class_id,
            score: 1.0,
            instance_id: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_instance(mut self, id: impl Into<String>) -> Self {
        self.instance_id = Some(id.into());
        self
    }

    pub fn bev(&self) -> BevBox {
        BevBox {
            cx: self.center.x,
            cy: self.center.y,
            length: self.length,
            width: self.width,
            yaw: self.yaw,
        }
    }

    pub fn bottom(&self) -> f64 {
        self.center.z - self.height / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center.z + self.height / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    /// Checks the `length ≥ width > 0`, `height > 0`, `score ∈ [0, 1]` contract.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.center.is_finite()
            && [self.length, self.width, self.height, self.yaw, self.score]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidArgument(
                "non-finite box field".into(),
            ));
        }
        if !(self.width > 0.0 && self.length >= self.width && self.height > 0.0) {
            return Err(GeometryError::InvalidArgument(format!(
                "box dimensions {}x{}x{} violate length >= width > 0, height > 0",
                self.length, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(GeometryError::InvalidArgument(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    /// Box expressed in its own frame: `(along heading, along left normal, up)`.
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (a, b) = self.bev().to_local(p.x, p.y);
        Point3::new(a, b, p.z - self.center.z)
    }

    pub fn contains(&self, p: Point3, tolerance: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.length / 2.0 + tolerance
            && l.y.abs() <= self.width / 2.0 + tolerance
            && l.z.abs() <= self.height / 2.0 + tolerance
    }

    /// Applies a rotation about +z and a translation.
    pub fn transformed(&self, yaw: f64, translation: Point3) -> Self {
        let t = RigidTransform::from_yaw(yaw, translation);
        Self {
            center: t.apply(self.center),
            yaw: normalize_angle(self.yaw + yaw),
            ..self.clone()
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counterclockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice / 2.0
}

/// Sutherland–Hodgman clipping of `subject` against the counterclockwise convex `clip`.
pub fn clip_convex_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    output.push(line_intersection(prev, cur, dp, dc));
                }
                output.push(cur);
            } else if dp >= 0.0 {
                output.push(line_intersection(prev, cur, dp, dc));
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the overlap of two BEV rectangles.
pub fn bev_intersection_area(a: &BevBox, b: &BevBox) -> f64 {
    if a.same_footprint(b) {
        return a.area();
    }
    let reach = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return 0.0;
    }
    let area = polygon_area(&clip_convex_polygon(&a.corners(), &b.corners()));
    if area < AREA_EPSILON {
        0.0
    } else {
        area.min(a.area()).min(b.area())
    }
}

pub fn bev_iou(a: &BevBox, b: &BevBox) -> f64 {
    if a.same_footprint(b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (fa, fb) = (a.bev(), b.bev());
    if fa.same_footprint(&fb) && a.center.z == b.center.z && a.height == b.height {
        return 1.0;
    }
    let overlap_z = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_z == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(&fa, &fb) * overlap_z;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// Indices of the points inside `bbox`, faces included.
pub fn points_in_box(points: &[Point3], bbox: &Box3D) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(**p, CONTAINMENT_TOLERANCE))
        .map(|(i, _)| i)
        .collect()
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}
