//! Initial pseudo-box generation: fit a BEV rectangle to each cleaned instance,
//! grow implausibly small rectangles to class size priors, and lift to 3D.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::class::ClassId;
use crate::filtering::{filter_instance, FilterParams, FilterStages};
use crate::fusion::{InstanceCloud, InstanceKey};
use crate::geometry::{BevBox, Box3D, Point3};
use crate::io::{read_text, write_file, IoError, ParseError};

/// Heading candidates are whole degrees in `[0°, 90°)`.
pub const HEADING_STEPS: u32 = 90;

/// Minimum distance used in the closeness score so one point cannot dominate.
pub const CLOSENESS_FLOOR: f64 = 0.01;

/// Point sets thinner than this across their principal axis count as collinear.
pub const COLLINEAR_TOLERANCE: f64 = 1e-6;

pub const FIT_SCORE: f64 = 1.0;
pub const FALLBACK_SCORE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum BoxFitError {
    #[error("need at least 3 points for a rectangle fit, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear in the ground plane")]
    Collinear,
    #[error("no size prior configured for class {0}")]
    UnknownClass(ClassId),
    #[error("cannot lift a box without points")]
    NoPoints,
    #[error("invalid size prior for class {class}: {reason}")]
    InvalidPrior { class: ClassId, reason: String },
}

/// Minimum and typical dimensions of one class, in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSize {
    pub min_length: f64,
    pub min_width: f64,
    pub min_height: f64,
    pub prior_length: f64,
    pub prior_width: f64,
    pub prior_height: f64,
}

impl ClassSize {
    pub const fn new(min: [f64; 3], prior: [f64; 3]) -> Self {
        Self {
            min_length: min[0],
            min_width: min[1],
            min_height: min[2],
            prior_length: prior[0],
            prior_width: prior[1],
            prior_height: prior[2],
        }
    }

    fn validate(&self, class: ClassId) -> Result<(), BoxFitError> {
        let fail = |reason: &str| {
            Err(BoxFitError::InvalidPrior {
                class,
                reason: reason.into(),
            })
        };
        let pairs = [
            (self.min_length, self.prior_length),
            (self.min_width, self.prior_width),
            (self.min_height, self.prior_height),
        ];
        if pairs
            .iter()
            .any(|&(min, prior)| !(min > 0.0 && min <= prior && prior.is_finite()))
        {
            return fail("need 0 < min <= prior for every dimension");
        }
        if self.min_length < self.min_width || self.prior_length < self.prior_width {
            return fail("length must not be smaller than width");
        }
        Ok(())
    }
}

/// Per-class size priors.
#[derive(Debug, Clone, PartialEq)]
pub struct SizePriors {
    classes: BTreeMap<ClassId, ClassSize>,
}

impl Default for SizePriors {
    fn default() -> Self {
        Self {
            classes: BTreeMap::from([
                (
                    ClassId::VEHICLE,
                    ClassSize::new([3.0, 1.4, 1.0], [4.6, 1.9, 1.7]),
                ),
                (
                    ClassId::PEDESTRIAN,
                    ClassSize::new([0.4, 0.4, 1.2], [0.7, 0.6, 1.7]),
                ),
                (
                    ClassId::CYCLIST,
                    ClassSize::new([1.2, 0.4, 1.0], [1.8, 0.6, 1.6]),
                ),
            ]),
        }
    }
}

impl SizePriors {
    pub fn new(classes: BTreeMap<ClassId, ClassSize>) -> Result<Self, BoxFitError> {
        for (&class, size) in &classes {
            size.validate(class)?;
        }
        Ok(Self { classes })
    }

    pub fn get(&self, class: ClassId) -> Result<&ClassSize, BoxFitError> {
        self.classes
            .get(&class)
            .ok_or(BoxFitError::UnknownClass(class))
    }

    pub fn classes(&self) -> impl Iterator<Item = (&ClassId, &ClassSize)> {
        self.classes.iter()
    }

    /// Parses `class_id min_l min_w min_h prior_l prior_w prior_h` lines.
    pub fn decode(text: &str) -> Result<Self, ParseError> {
        let mut classes = BTreeMap::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(ParseError::Line {
                    line,
                    reason: format!("expected 7 fields, found {}", fields.len()),
                });
            }
            let class: ClassId = fields[0].parse().map_err(|e| ParseError::Line {
                line,
                reason: format!("{e}"),
            })?;
            let mut v = [0.0; 6];
            for (slot, text) in v.iter_mut().zip(&fields[1..]) {
                *slot = text.parse().map_err(|_| ParseError::Line {
                    line,
                    reason: format!("bad number {text:?}"),
                })?;
            }
            let size = ClassSize::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
            size.validate(class).map_err(|e| ParseError::Line {
                line,
                reason: e.to_string(),
            })?;
            if classes.insert(class, size).is_some() {
                return Err(ParseError::Line {
                    line,
                    reason: format!("duplicate class {class}"),
                });
            }
        }
        Ok(Self { classes })
    }

    pub fn encode(&self) -> String {
        self.classes
            .iter()
            .map(|(c, s)| {
                format!(
                    "{c} {} {} {} {} {} {}\n",
                    s.min_length,
                    s.min_width,
                    s.min_height,
                    s.prior_length,
                    s.prior_width,
                    s.prior_height
                )
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        Self::decode(&read_text(path)?).map_err(|e| IoError::parse(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        write_file(path.as_ref(), self.encode().as_bytes())
    }
}

/// Closeness score of a heading: points hugging the nearer pair of rectangle
/// edges score high.
fn closeness(c1: &[f64], c2: &[f64]) -> f64 {
    let nearer_edge = |c: &[f64]| -> Vec<f64> {
        let (min, max) = min_max(c);
        let to_max: Vec<f64> = c.iter().map(|v| max - v).collect();
        let to_min: Vec<f64> = c.iter().map(|v| v - min).collect();
        let norm = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>();
        if norm(&to_min) <= norm(&to_max) {
            to_min
        } else {
            to_max
        }
    };
    let (d1, d2) = (nearer_edge(c1), nearer_edge(c2));
    d1.iter()
        .zip(&d2)
        .map(|(a, b)| 1.0 / a.min(*b).max(CLOSENESS_FLOOR))
        .sum()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn is_collinear(points: &[Point3]) -> bool {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx / n;
        syy += dy * dy / n;
        sxy += dx * dy / n;
    }
    let half_trace = (sxx + syy) / 2.0;
    let spread = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let minor_variance = (half_trace - spread).max(0.0);
    minor_variance.sqrt() < COLLINEAR_TOLERANCE
}

/// Fits the enclosing rectangle whose heading maximizes the closeness score
/// over whole-degree headings in `[0°, 90°)`. Ties keep the smaller heading.
pub fn fit_bev_rectangle(points: &[Point3]) -> Result<BevBox, BoxFitError> {
    if points.len() < 3 {
        return Err(BoxFitError::TooFewPoints(points.len()));
    }
    if is_collinear(points) {
        return Err(BoxFitError::Collinear);
    }
    let mut best: Option<(f64, f64)> = None;
    for step in 0..HEADING_STEPS {
        let theta = f64::from(step).to_radians();
        let (s, c) = theta.sin_cos();
        let c1: Vec<f64> = points.iter().map(|p| p.x * c + p.y * s).collect();
        let c2: Vec<f64> = points.iter().map(|p| -p.x * s + p.y * c).collect();
        let score = closeness(&c1, &c2);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, theta));
        }
    }
    let (_, theta) = best.expect("at least one heading");
    Ok(enclosing_rectangle(points, theta))
}

/// Tightest rectangle with heading `theta` containing all points.
pub fn enclosing_rectangle(points: &[Point3], theta: f64) -> BevBox {
    let (s, c) = theta.sin_cos();
    let c1: Vec<f64> = points.iter().map(|p| p.x * c + p.y * s).collect();
    let c2: Vec<f64> = points.iter().map(|p| -p.x * s + p.y * c).collect();
    let ((lo1, hi1), (lo2, hi2)) = (min_max(&c1), min_max(&c2));
    let (m1, m2) = ((lo1 + hi1) / 2.0, (lo2 + hi2) / 2.0);
    BevBox::new(
        m1 * c - m2 * s,
        m1 * s + m2 * c,
        hi1 - lo1,
        hi2 - lo2,
        theta,
    )
}

/// Axis-aligned box of the class minimum footprint at the BEV centroid.
pub fn fallback_rectangle(
    points: &[Point3],
    class: ClassId,
    priors: &SizePriors,
) -> Result<BevBox, BoxFitError> {
    let size = priors.get(class)?;
    if points.is_empty() {
        return Err(BoxFitError::NoPoints);
    }
    let n = points.len() as f64;
    let (cx, cy) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    Ok(BevBox::new(cx, cy, size.min_length, size.min_width, 0.0))
}

/// Grows a rectangle that is below the class minimum to the class prior.
///
/// Only deficient dimensions grow. The edge nearest the sensor (the visible
/// face) stays in place: growth across it extends away from the sensor and
/// growth along it is symmetric about its midpoint. When the sensor is nearest
/// a corner, the edge whose outward normal points most directly at the sensor
/// is the visible one.
pub fn apply_size_prior(
    bev: &BevBox,
    class: ClassId,
    priors: &SizePriors,
    sensor_origin: Point3,
) -> Result<BevBox, BoxFitError> {
    let size = priors.get(class)?;
    if bev.length >= size.min_length && bev.width >= size.min_width {
        return Ok(*bev);
    }
    // A short width means a single face was seen. It is the object's end
    // when its extent is nearer the prior width than the prior length.
    let end_on = bev.width < size.min_width
        && bev.length * bev.length < size.prior_length * size.prior_width;
    let bev = &if end_on {
        BevBox {
            length: bev.width,
            width: bev.length,
            yaw: bev.yaw + std::f64::consts::FRAC_PI_2,
            ..*bev
        }
    } else {
        *bev
    };
    let length = if bev.length < size.min_length {
        size.prior_length
    } else {
        bev.length
    };
    let width = if bev.width < size.min_width {
        size.prior_width
    } else {
        bev.width
    };
    let nearest = visible_edge(bev, sensor_origin);
    let (heading, normal) = bev.axes();
    let (dir, offset, new_offset) = match nearest {
        Edge::Front => (heading, bev.length / 2.0, length / 2.0),
        Edge::Rear => ([-heading[0], -heading[1]], bev.length / 2.0, length / 2.0),
        Edge::Left => (normal, bev.width / 2.0, width / 2.0),
        Edge::Right => ([-normal[0], -normal[1]], bev.width / 2.0, width / 2.0),
    };
    let shift = offset - new_offset;
    let grown = BevBox {
        cx: bev.cx + dir[0] * shift,
        cy: bev.cy + dir[1] * shift,
        length,
        width,
        yaw: bev.yaw,
    };
    Ok(grown.canonical())
}

/// Rectangle edges, named in the box frame (x along the heading).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Front,
    Rear,
    Left,
    Right,
}

/// The edge nearest `sensor` by point-to-segment distance; ties go to the edge
/// facing the sensor most directly.
pub fn visible_edge(bev: &BevBox, sensor: Point3) -> Edge {
    let (sx, sy) = bev.to_local(sensor.x, sensor.y);
    let (hl, hw) = (bev.length / 2.0, bev.width / 2.0);
    let beyond = |v: f64, half: f64| (v.abs() - half).max(0.0);
    // (edge, signed distance along its outward normal, overshoot along the edge, offset of the sensor along the edge)
    let candidates = [
        (Edge::Front, sx - hl, beyond(sy, hw), sy),
        (Edge::Rear, -sx - hl, beyond(sy, hw), sy),
        (Edge::Left, sy - hw, beyond(sx, hl), sx),
        (Edge::Right, -sy - hw, beyond(sx, hl), sx),
    ];
    let score = |&(_, normal, along, offset): &(Edge, f64, f64, f64)| {
        let distance = (normal * normal + along * along).sqrt();
        let facing = normal
            / (normal * normal + offset * offset)
                .sqrt()
                .max(f64::MIN_POSITIVE);
        (distance, facing)
    };
    candidates
        .iter()
        .min_by(|a, b| {
            let ((da, fa), (db, fb)) = (score(a), score(b));
            da.total_cmp(&db).then(fb.total_cmp(&fa))
        })
        .map(|c| c.0)
        .expect("four edges")
}

/// Lifts a BEV rectangle to 3D. The top is the highest point; the bottom is the
/// lowest point, pushed down to honour the class minimum height.
pub fn lift_to_3d(
    bev: &BevBox,
    points: &[Point3],
    class: ClassId,
    priors: &SizePriors,
) -> Result<Box3D, BoxFitError> {
    let size = priors.get(class)?;
    if points.is_empty() {
        return Err(BoxFitError::NoPoints);
    }
    let (lo, top) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.z), hi.max(p.z))
        });
    let bottom = if top - lo < size.min_height {
        top - size.min_height
    } else {
        lo
    };
    Ok(Box3D::from_bev(
        *bev,
        (top + bottom) / 2.0,
        top - bottom,
        class,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitQuality {
    Fitted,
    /// Too few or collinear points; the class minimum footprint was used.
    Fallback,
}

/// Settings for [`generate_initial_boxes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationParams {
    pub filter: FilterParams,
    pub stages: FilterStages,
    pub sensor_origin: Point3,
    pub fit_score: f64,
    pub fallback_score: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            filter: FilterParams::default(),
            stages: FilterStages::default(),
            sensor_origin: Point3::ORIGIN,
            fit_score: FIT_SCORE,
            fallback_score: FALLBACK_SCORE,
        }
    }
}

/// Per-instance bookkeeping from box generation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub key: InstanceKey,
    pub class_id: ClassId,
    pub real: usize,
    pub pseudo: usize,
    pub after_local: usize,
    pub after_global: usize,
    pub anchored: bool,
    pub fit: Option<FitQuality>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generation {
    pub boxes: Vec<Box3D>,
    pub instances: Vec<InstanceReport>,
}

fn instance_box(
    cloud: &InstanceCloud,
    params: &GenerationParams,
    priors: &SizePriors,
) -> Result<(Option<Box3D>, InstanceReport), BoxFitError> {
    let filtered = filter_instance(cloud, &params.filter, params.sensor_origin, params.stages);
    let mut report = InstanceReport {
        key: cloud.key.clone(),
        class_id: cloud.class_id,
        real: cloud.real.len(),
        pseudo: cloud.pseudo.len(),
        after_local: filtered.after_local,
        after_global: filtered.after_global,
        anchored: filtered.anchored,
        fit: None,
    };
    if filtered.points.is_empty() {
        return Ok((None, report));
    }
    let points: Vec<Point3> = filtered.points.iter().map(|p| p.position).collect();
    let (rect, quality) = match fit_bev_rectangle(&points) {
        Ok(rect) => (rect, FitQuality::Fitted),
        Err(BoxFitError::TooFewPoints(_) | BoxFitError::Collinear) => (
            fallback_rectangle(&points, cloud.class_id, priors)?,
            FitQuality::Fallback,
        ),
        Err(e) => return Err(e),
    };
    let rect = apply_size_prior(&rect, cloud.class_id, priors, params.sensor_origin)?;
    let score = match quality {
        FitQuality::Fitted => params.fit_score,
        FitQuality::Fallback => params.fallback_score,
    };
    let bbox = lift_to_3d(&rect, &points, cloud.class_id, priors)?
        .with_score(score)
        .with_instance(cloud.key.to_string());
    report.fit = Some(quality);
    Ok((Some(bbox), report))
}

/// Filter, fit, size-correct and lift every instance. Unanchored instances
/// dropped by the filter produce no box. Output follows the input order.
pub fn generate_initial_boxes(
    clouds: &[InstanceCloud],
    params: &GenerationParams,
    priors: &SizePriors,
) -> Result<Generation, BoxFitError> {
    let results: Vec<_> = clouds
        .par_iter()
        .map(|c| instance_box(c, params, priors))
        .collect();
    let mut generation = Generation::default();
    for result in results {
        let (bbox, report) = result?;
        generation.boxes.extend(bbox);
        generation.instances.push(report);
    }
    Ok(generation)
}
