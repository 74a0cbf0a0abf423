use nalgebra::Vector3;
use rayon::prelude::*;

use super::{GeometryError, PointCloud};

const EXHAUSTIVE_BELOW: usize = 64;
const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact kd-tree over a fixed point set. Neighbor lists are ordered by
/// `(squared distance, index)`, so equidistant points resolve to the smaller
/// index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

pub(crate) fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        let n = points.len();
        if n < EXHAUSTIVE_BELOW {
            tree.nodes.push(Node::Leaf { start: 0, end: n });
        } else {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `q`, skipping index `skip`, as
    /// `(squared distance, index)` in ascending order.
    pub fn knn(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        self.knn_rec(0, q, k, skip, &mut best);
        best
    }

    fn knn_rec(&self, node: usize, q: &Vector3<f64>, k: usize, skip: Option<usize>, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let cand = (dist2(q, &self.points[i]), i);
                    if best.len() == k {
                        let worst = best[k - 1];
                        if (cand.0, cand.1) >= (worst.0, worst.1) {
                            continue;
                        }
                    }
                    let pos = best.partition_point(|e| (e.0, e.1) < (cand.0, cand.1));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, skip, best);
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.knn_rec(far, q, k, skip, best);
                }
            }
        }
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(f64, usize)> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// Indices within `radius` of `q` (inclusive), ascending.
    pub fn within_radius(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_rec(0, q, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: usize, q: &Vector3<f64>, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.order[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| dist2(q, &self.points[i]) <= r2),
                );
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far, q, r2, out);
                }
            }
        }
    }
}

/// Directed edges `i → j` from every point to its `k` nearest distinct points.
pub fn knn_edges(p: &PointCloud, k: usize) -> Result<Vec<(usize, usize)>, GeometryError> {
    let n = p.len();
    if k >= n {
        return Err(GeometryError::KTooLarge { k, n });
    }
    let tree = KdTree::new(p.points());
    let per_point: Vec<Vec<(usize, usize)>> = p
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, q)| tree.knn(q, k, Some(i)).into_iter().map(|(_, j)| (i, j)).collect())
        .collect();
    Ok(per_point.into_iter().flatten().collect())
}
