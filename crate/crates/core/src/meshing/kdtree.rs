//! Static 3D kd-tree for nearest-neighbor queries.

use crate::geometry::Vec3;

const LEAF: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut t = Self {
            points: points.to_vec(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            t.build(0, points.len());
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let pts = &mut self.points[start..end];
        let (mut lo, mut hi) = (pts[0], pts[0]);
        for p in pts.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let value = pts[mid][axis];
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Squared distance to the nearest point, `None` when empty.
    pub fn nearest_dist2(&self, q: &Vec3) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, n: usize, q: &Vec3, best: &mut f64) {
        match self.nodes[n] {
            Node::Leaf { start, end } => {
                for p in &self.points[start..end] {
                    *best = best.min((p - q).norm_squared());
                }
            }
            Node::Split { axis, value, left, right } => {
                let d = q[axis] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if d * d < *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}
