//! Exact k-d tree over 3D points.
//!
//! Neighbours are ranked by `(squared distance, point index)`, so equal
//! distances resolve to the lowest index and results match a brute-force scan
//! element for element.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        lo: usize,
        hi: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbour: point index and squared distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_squared: f64,
}

impl Neighbor {
    fn rank(&self, other: &Self) -> Ordering {
        self.distance_squared
            .total_cmp(&other.distance_squared)
            .then(self.index.cmp(&other.index))
    }
}

struct Ranked(Neighbor);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.0.rank(&other.0) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank(&other.0)
    }
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut tree = Self {
            points: points.iter().map(|p| p.to_array()).collect(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let axis = self.widest_axis(lo, hi);
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { lo, hi });
        let left = self.build(lo, mid);
        let right = self.build(mid, hi);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, lo: usize, hi: usize) -> usize {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.order[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0)
    }

    /// The `k` nearest points to `query`, nearest first, optionally skipping one index.
    pub fn knn(&self, query: Point3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = query.to_array();
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, &q, k, exclude, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|r| r.0).collect();
        out.sort_by(Neighbor::rank);
        out
    }

    pub fn nearest(&self, query: Point3) -> Option<Neighbor> {
        self.knn(query, 1, None).into_iter().next()
    }

    fn search(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Ranked>,
    ) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &index in &self.order[lo..hi] {
                    if Some(index) == exclude {
                        continue;
                    }
                    let p = &self.points[index];
                    let distance_squared =
                        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    let candidate = Ranked(Neighbor {
                        index,
                        distance_squared,
                    });
                    if heap.len() < k {
                        heap.push(candidate);
                    } else if candidate < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(candidate);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, exclude, heap);
                let worst = heap.peek().map(|r| r.0.distance_squared);
                if heap.len() < k || worst.is_some_and(|w| diff * diff <= w) {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}
