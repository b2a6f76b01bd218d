//! Exact k-d tree over 3-D points.
//!
//! Neighbours are ordered by `(squared distance, index)`, so equidistant
//! points come back in ascending index order and query results equal a
//! brute-force scan exactly.

use std::cmp::Ordering;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Neighbor) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable spatial index; safe to query from several threads.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

struct Best {
    k: usize,
    items: Vec<Neighbor>,
}

impl Best {
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.items.len() - 1].dist2
        }
    }

    fn offer(&mut self, cand: Neighbor) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if cand.cmp_key(&last) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|x| x.cmp_key(&cand) == Ordering::Less);
        self.items.insert(pos, cand);
    }
}

impl NeighborIndex {
    pub fn build(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("neighbor index"));
        }
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let spread = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut axis = 0;
        for a in 1..3 {
            if spread[a] > spread[axis] {
                axis = a;
            }
        }
        axis
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64; 3] {
        &self.points[i]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// The `k` nearest points, nearest first.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<Neighbor> {
        self.knn_filtered(query, k, |_| true)
    }

    /// The `k` nearest points among those accepted by `accept`.
    pub fn knn_filtered<F>(&self, query: &[f64; 3], k: usize, accept: F) -> Vec<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        if k == 0 {
            return Vec::new();
        }
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        self.search(0, query, &accept, &mut best);
        best.items
    }

    pub fn nearest(&self, query: &[f64; 3]) -> Neighbor {
        self.knn(query, 1)[0]
    }

    pub fn nearest_filtered<F>(&self, query: &[f64; 3], accept: F) -> Option<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        self.knn_filtered(query, 1, accept).into_iter().next()
    }

    fn search<F>(&self, node: usize, q: &[f64; 3], accept: &F, best: &mut Best)
    where
        F: Fn(usize) -> bool,
    {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if !accept(i) {
                        continue;
                    }
                    best.offer(Neighbor {
                        index: i,
                        dist2: squared_distance(&self.points[i], q),
                    });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, accept, best);
                if diff * diff <= best.worst() {
                    self.search(far, q, accept, best);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), nearest first.
    pub fn within(&self, query: &[f64; 3], radius: f64) -> Vec<Neighbor> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.collect_within(0, query, r2, &mut out);
        out.sort_by(|a, b| a.cmp_key(b));
        out
    }

    fn collect_within(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = squared_distance(&self.points[i], q);
                    if d2 <= r2 {
                        out.push(Neighbor { index: i, dist2: d2 });
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
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.collect_within(near, q, r2, out);
                if diff * diff <= r2 {
                    self.collect_within(far, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point() {
        let idx = NeighborIndex::build(&[[1.0, 2.0, 3.0]]).unwrap();
        let n = idx.knn(&[10.0, -4.0, 0.0], 1);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].index, 0);
        assert_eq!(idx.knn(&[0.0; 3], 5).len(), 1);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(NeighborIndex::build(&[]).is_err());
    }

    #[test]
    fn duplicates_come_back_in_index_order() {
        let mut pts = vec![[5.0, 5.0, 5.0]; 3];
        pts.extend(vec![[0.0, 0.0, 0.0]; 20]);
        pts.push([0.1, 0.0, 0.0]);
        let idx = NeighborIndex::build(&pts).unwrap();
        let n: Vec<usize> = idx.knn(&[0.0; 3], 21).iter().map(|n| n.index).collect();
        let mut expected: Vec<usize> = (3..23).collect();
        expected.push(23);
        assert_eq!(n, expected);
    }

    #[test]
    fn radius_query_is_inclusive() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let idx = NeighborIndex::build(&pts).unwrap();
        let got: Vec<usize> = idx.within(&[0.0; 3], 1.0).iter().map(|n| n.index).collect();
        assert_eq!(got, vec![0, 1]);
    }
}
