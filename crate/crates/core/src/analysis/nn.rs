//! Exact Euclidean 1-nearest-neighbour search over state vectors.

use crate::data::STATE_DIM;
use crate::error::{Error, Result};

type Vector = [f64; STATE_DIM];

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Median-split kd-tree; queries return the same point a linear scan would
/// (lowest index among exact ties).
#[derive(Debug, Clone)]
pub struct NearestTree {
    points: Vec<Vector>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl NearestTree {
    pub fn new(points: Vec<Vector>) -> Result<NearestTree> {
        if points.is_empty() {
            return Err(Error::InsufficientData("nearest-neighbour tree needs points".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("nearest-neighbour tree input is non-finite".into()));
        }
        let n = points.len();
        let mut tree = NearestTree {
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        tree.root = tree.build(0, n);
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let axis = (0..STATE_DIM)
            .map(|d| {
                let (lo, hi) = self.order[start..end]
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(self.points[i][d]), hi.max(self.points[i][d]))
                    });
                (d, hi - lo)
            })
            .fold((0, -1.0), |best, (d, w)| if w > best.1 { (d, w) } else { best })
            .0;
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes.push(Node::Split { axis, value, left, right });
        self.nodes.len() - 1
    }

    /// Index and Euclidean distance of the nearest stored point.
    pub fn nearest(&self, q: &Vector) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.visit(self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn visit(&self, node: usize, q: &Vector, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2: f64 = self.points[i].iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let gap = q[axis] - value;
                let (near, far) = if gap < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, best);
                if gap * gap <= best.1 {
                    self.visit(far, q, best);
                }
            }
        }
    }
}
