//! Two-stage noise suppression for fused instance point sets.
//!
//! The local stage keeps a pseudo point only if it lies within
//! `λ · ‖anchor − origin‖` of its nearest real point (the anchor), so the ball
//! grows with range where LiDAR is sparse. The global stage is statistical
//! outlier removal: a point survives when the mean distance to its `k` nearest
//! neighbours is at most `μ + α·σ` of that statistic over the whole set.

use rayon::prelude::*;
use thiserror::Error;

use crate::fusion::{InstanceCloud, LabeledPoint};
use crate::geometry::Point3;
use crate::kdtree::KdTree;

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_K_NEIGHBORS: usize = 16;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid filter parameter: {0}")]
    InvalidParams(String),
}

/// What to do with an instance that has no real points to anchor the local filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnanchoredPolicy {
    /// Drop the instance entirely.
    #[default]
    Drop,
    /// Keep all its pseudo points unfiltered and mark it unanchored.
    KeepFlagged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub lambda: f64,
    pub k_neighbors: usize,
    pub alpha: f64,
    pub unanchored: UnanchoredPolicy,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            alpha: DEFAULT_ALPHA,
            unanchored: UnanchoredPolicy::Drop,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(FilterError::InvalidParams(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.k_neighbors < 1 {
            return Err(FilterError::InvalidParams(
                "k_neighbors must be >= 1".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(FilterError::InvalidParams(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Result of the range-scaled radius filter for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFiltered {
    /// Real points first, then surviving pseudo points, each in input order.
    pub points: Vec<LabeledPoint>,
    pub kept_pseudo: usize,
    /// False when the instance had no real points.
    pub anchored: bool,
}

/// Indices of pseudo points within `λ·‖anchor − origin‖` of their nearest real point.
pub fn local_radius_keep(
    real: &[Point3],
    pseudo: &[Point3],
    lambda: f64,
    origin: Point3,
) -> Vec<usize> {
    if real.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(real);
    pseudo
        .par_iter()
        .enumerate()
        .filter_map(|(j, &v)| {
            let anchor = real[tree.nearest(v).expect("tree is non-empty").index];
            (v.distance(anchor) <= lambda * anchor.distance(origin)).then_some(j)
        })
        .collect()
}

pub fn local_radius_filter(
    cloud: &InstanceCloud,
    params: &FilterParams,
    origin: Point3,
) -> LocalFiltered {
    if cloud.real.is_empty() {
        let points = match params.unanchored {
            UnanchoredPolicy::Drop => Vec::new(),
            UnanchoredPolicy::KeepFlagged => cloud.pseudo.clone(),
        };
        log::info!(
            "instance {} has no real points ({} pseudo points, policy {:?})",
            cloud.key,
            cloud.pseudo.len(),
            params.unanchored
        );
        let kept_pseudo = points.len();
        return LocalFiltered {
            points,
            kept_pseudo,
            anchored: false,
        };
    }
    let real: Vec<Point3> = cloud.real.iter().map(|p| p.position).collect();
    let pseudo: Vec<Point3> = cloud.pseudo.iter().map(|p| p.position).collect();
    let keep = local_radius_keep(&real, &pseudo, params.lambda, origin);
    let mut points = cloud.real.clone();
    points.extend(keep.iter().map(|&j| cloud.pseudo[j].clone()));
    LocalFiltered {
        points,
        kept_pseudo: keep.len(),
        anchored: true,
    }
}

/// Mean distance from each point to its `k` nearest neighbours (itself excluded),
/// summed nearest first.
pub fn mean_neighbor_distances(points: &[Point3], k: usize) -> Vec<f64> {
    let tree = KdTree::new(points);
    points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let neighbors = tree.knn(p, k, Some(i));
            let sum: f64 = neighbors.iter().map(|n| n.distance_squared.sqrt()).sum();
            sum / neighbors.len() as f64
        })
        .collect()
}

/// Indices of points kept by statistical outlier removal. Sets with at most
/// `k_neighbors` points are returned whole.
pub fn global_statistical_keep(points: &[Point3], params: &FilterParams) -> Vec<usize> {
    let n = points.len();
    if n <= params.k_neighbors {
        return (0..n).collect();
    }
    let means = mean_neighbor_distances(points, params.k_neighbors);
    let mu = means.iter().sum::<f64>() / n as f64;
    let sigma = (means.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
    let threshold = mu + params.alpha * sigma;
    (0..n).filter(|&i| means[i] <= threshold).collect()
}

pub fn global_statistical_filter(
    points: &[LabeledPoint],
    params: &FilterParams,
) -> Vec<LabeledPoint> {
    let positions: Vec<Point3> = points.iter().map(|p| p.position).collect();
    global_statistical_keep(&positions, params)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

/// Which filter stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterStages {
    pub local: bool,
    pub global: bool,
}

impl Default for FilterStages {
    fn default() -> Self {
        Self {
            local: true,
            global: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredInstance {
    pub points: Vec<LabeledPoint>,
    pub anchored: bool,
    pub after_local: usize,
    pub after_global: usize,
}

/// Runs the enabled stages on one instance. With the local stage disabled every
/// instance counts as anchored and `F = R ∪ V`.
pub fn filter_instance(
    cloud: &InstanceCloud,
    params: &FilterParams,
    origin: Point3,
    stages: FilterStages,
) -> FilteredInstance {
    let (fused, anchored) = if stages.local {
        let local = local_radius_filter(cloud, params, origin);
        (local.points, local.anchored)
    } else {
        (
            cloud.real.iter().chain(&cloud.pseudo).cloned().collect(),
            true,
        )
    };
    let after_local = fused.len();
    let points = if stages.global {
        global_statistical_filter(&fused, params)
    } else {
        fused
    };
    FilteredInstance {
        after_global: points.len(),
        points,
        anchored,
        after_local,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ClassId;
    use crate::fusion::{InstanceKey, Origin};
    use proptest::prelude::*;

    fn labeled(points: &[Point3], origin: Origin) -> Vec<LabeledPoint> {
        points
            .iter()
            .map(|&position| LabeledPoint {
                position,
                class_id: ClassId::VEHICLE,
                instance: InstanceKey::new("C", 1),
                origin,
            })
            .collect()
    }

    fn cloud(real: &[Point3], pseudo: &[Point3]) -> InstanceCloud {
        InstanceCloud {
            key: InstanceKey::new("C", 1),
            class_id: ClassId::VEHICLE,
            real: labeled(real, Origin::Real),
            pseudo: labeled(pseudo, Origin::Pseudo),
        }
    }

    /// O(|R|·|V|) reference for the local filter.
    fn local_oracle(real: &[Point3], pseudo: &[Point3], lambda: f64, origin: Point3) -> Vec<usize> {
        let mut keep = Vec::new();
        if real.is_empty() {
            return keep;
        }
        for (j, v) in pseudo.iter().enumerate() {
            let mut best = 0;
            for i in 1..real.len() {
                if v.distance_squared(real[i]) < v.distance_squared(real[best]) {
                    best = i;
                }
            }
            if v.distance(real[best]) <= lambda * real[best].distance(origin) {
                keep.push(j);
            }
        }
        keep
    }

    #[test]
    fn radius_scales_with_anchor_range() {
        // Anchor at 100 m with λ = 0.01 gives a 1 m ball.
        let r = [Point3::new(100.0, 0.0, 0.0)];
        let v = [Point3::new(100.0, 0.5, 0.0), Point3::new(100.0, 0.0, 1.5)];
        let params = FilterParams {
            lambda: 0.01,
            ..Default::default()
        };
        assert_eq!(local_oracle(&r, &v, 0.01, Point3::ORIGIN), vec![0]);
        let out = local_radius_filter(&cloud(&r, &v), &params, Point3::ORIGIN);
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.points[1].position, v[0]);
        assert_eq!(out.kept_pseudo, 1);
    }

    #[test]
    fn empty_pseudo_keeps_real() {
        let r = [Point3::new(5.0, 1.0, 0.0), Point3::new(5.0, 2.0, 0.0)];
        let out = local_radius_filter(&cloud(&r, &[]), &FilterParams::default(), Point3::ORIGIN);
        assert_eq!(out.points, labeled(&r, Origin::Real));
    }

    #[test]
    fn unanchored_policies() {
        let v = [Point3::new(5.0, 1.0, 0.0)];
        let c = cloud(&[], &v);
        let dropped = local_radius_filter(&c, &FilterParams::default(), Point3::ORIGIN);
        assert!(!dropped.anchored && dropped.points.is_empty());
        let params = FilterParams {
            unanchored: UnanchoredPolicy::KeepFlagged,
            ..Default::default()
        };
        let kept = local_radius_filter(&c, &params, Point3::ORIGIN);
        assert!(!kept.anchored);
        assert_eq!(kept.points.len(), 1);
    }

    #[test]
    fn far_outlier_removed_from_grid() {
        let mut points = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                points.push(Point3::new(f64::from(i), f64::from(j), 0.0));
            }
        }
        points.push(Point3::new(50.0, 50.0, 50.0));
        let params = FilterParams {
            k_neighbors: 16,
            alpha: 1.0,
            ..Default::default()
        };
        let keep = global_statistical_keep(&points, &params);
        assert_eq!(keep, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn equidistant_points_survive() {
        let tetra = [
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, -1.0, -1.0),
            Point3::new(-1.0, 1.0, -1.0),
            Point3::new(-1.0, -1.0, 1.0),
        ];
        for k in 1..=3 {
            let params = FilterParams {
                k_neighbors: k,
                alpha: 0.0,
                ..Default::default()
            };
            assert_eq!(global_statistical_keep(&tetra, &params), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn small_sets_untouched() {
        let pts = [
            Point3::ORIGIN,
            Point3::new(100.0, 0.0, 0.0),
            Point3::new(0.0, 0.1, 0.0),
        ];
        assert_eq!(
            global_statistical_keep(&pts, &FilterParams::default()),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn invalid_params() {
        assert!(FilterParams {
            lambda: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FilterParams {
            k_neighbors: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FilterParams {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FilterParams::default().validate().is_ok());
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<Point3>> {
        proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -2.0..2.0f64), 0..max).prop_map(
            |v| {
                v.into_iter()
                    .map(|(x, y, z)| Point3::new(x, y, z))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn local_filter_bounds_and_monotonicity(real in arb_points(40), pseudo in arb_points(120)) {
            let c = cloud(&real, &pseudo);
            let mut previous: Option<Vec<usize>> = None;
            for lambda in [0.001, 0.01, 0.1, 1.0] {
                let keep = local_radius_keep(&real, &pseudo, lambda, Point3::ORIGIN);
                prop_assert_eq!(&keep, &local_oracle(&real, &pseudo, lambda, Point3::ORIGIN));
                if let Some(prev) = &previous {
                    prop_assert!(prev.iter().all(|i| keep.contains(i)));
                }
                let params = FilterParams { lambda, ..Default::default() };
                let out = local_radius_filter(&c, &params, Point3::ORIGIN);
                if !real.is_empty() {
                    prop_assert_eq!(&out.points[..real.len()], &c.real[..]);
                }
                prop_assert!(out.points.iter().all(|p| c.real.contains(p) || c.pseudo.contains(p)));
                previous = Some(keep);
            }
        }

        #[test]
        fn filters_commute_with_rigid_motion(real in arb_points(30), pseudo in arb_points(80),
                                              yaw in -3.0..3.0f64, tx in -30.0..30.0f64, ty in -30.0..30.0f64) {
            let t = crate::geometry::RigidTransform::from_yaw(yaw, Point3::new(tx, ty, 0.3));
            let move_all = |pts: &[Point3]| pts.iter().map(|p| t.apply(*p)).collect::<Vec<_>>();
            let before = local_radius_keep(&real, &pseudo, 0.05, Point3::ORIGIN);
            let after = local_radius_keep(&move_all(&real), &move_all(&pseudo), 0.05, t.apply(Point3::ORIGIN));
            prop_assert_eq!(before, after);
            let all: Vec<Point3> = real.iter().chain(&pseudo).copied().collect();
            let params = FilterParams { k_neighbors: 4, ..Default::default() };
            let g1 = global_statistical_keep(&all, &params);
            let g2 = global_statistical_keep(&move_all(&all), &params);
            prop_assert_eq!(g1, g2);
        }
    }
}
