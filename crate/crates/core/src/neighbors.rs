//! k-nearest-neighbour queries on a kd-tree and the mean-offset
//! local context descriptor fed to the point encoder.
//!
//! Neighbours are ordered by `(squared distance, index)`, which makes the
//! result identical to a brute-force all-pairs sort.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::exec::Exec;
use crate::model::{PointCloud, Vec3};

/// Width of the local context descriptor.
pub const CONTEXT_WIDTH: usize = 3;

const LEAF_SIZE: usize = 8;

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Heap entry ordered by `(distance, index)`; the heap top is the worst kept neighbour.
#[derive(Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed point slice.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&i, &j| pts[i][axis].total_cmp(&pts[j][axis]));
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest other points of point `i`, nearest first, ties by index.
    pub fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len().saturating_sub(1));
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, i, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.1).collect()
    }

    fn search(&self, node: usize, i: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = &self.points[i];
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j == i {
                        continue;
                    }
                    let c = Candidate(dist2(q, &self.points[j]), j);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
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
                self.search(near, i, k, heap);
                // equal distances must still be visited for index tie-breaks
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(far, i, k, heap);
                }
            }
        }
    }
}

/// Mean offset from each point to its `k` nearest neighbours (`k` capped at
/// `n - 1`; zero for a lone point).
pub fn local_context(cloud: &PointCloud, k: usize) -> Vec<Vec3> {
    local_context_with(cloud, k, Exec::default())
}

pub fn local_context_with(cloud: &PointCloud, k: usize, exec: Exec) -> Vec<Vec3> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    local_context_at(&cloud.positions, &all, k, exec)
}

/// Context of the points `query` (indices into `points`), neighbours drawn
/// from all of `points`.
pub fn local_context_at(points: &[Vec3], query: &[usize], k: usize, exec: Exec) -> Vec<Vec3> {
    if points.len() <= 1 || k == 0 {
        return vec![[0.0; 3]; query.len()];
    }
    let tree = KdTree::new(points);
    exec.map(query.len(), |q| {
        let i = query[q];
        let nn = tree.knn(i, k);
        let mut acc = [0.0; 3];
        for &j in &nn {
            for a in 0..3 {
                acc[a] += points[j][a] - points[i][a];
            }
        }
        let inv = 1.0 / nn.len() as f64;
        [acc[0] * inv, acc[1] * inv, acc[2] * inv]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lone_point_has_zero_context() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]);
        assert_eq!(local_context(&c, 5), vec![[0.0; 3]]);
        assert!(local_context(&PointCloud::default(), 3).is_empty());
    }

    #[test]
    fn mutual_nearest_pair() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(
            local_context(&c, 1),
            vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]
        );
        // k larger than n - 1 is capped
        assert_eq!(
            local_context(&c, 10),
            vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]
        );
    }

    #[test]
    fn ties_break_by_index() {
        let c = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        let tree = KdTree::new(&c.positions);
        assert_eq!(tree.knn(0, 2), vec![1, 2]);
    }

    #[test]
    fn coincident_points() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0]; 4]);
        assert_eq!(local_context(&c, 2), vec![[0.0; 3]; 4]);
    }

    #[test]
    fn far_outlier_still_finds_neighbours() {
        let mut pts: Vec<Vec3> = (0..200)
            .map(|i| [(i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0])
            .collect();
        pts.push([500.0, -300.0, 40.0]);
        let c = PointCloud::new(pts);
        let tree = KdTree::new(&c.positions);
        let nn = tree.knn(200, 3);
        assert_eq!(nn.len(), 3);
        // nearest lattice corners to the outlier: x = 1.9, y = 0.0
        assert_eq!(nn[0], 19);
    }
}
