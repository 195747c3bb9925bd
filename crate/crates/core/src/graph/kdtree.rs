//! Exact k-d tree with bucketed leaves.
//!
//! Each inner node splits at the median of the dimension with the largest
//! spread among its points. Search keeps a bounded candidate set ordered by
//! `(squared distance, node id)` so ties resolve to the lower id, identical
//! to a full scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const LEAF_SIZE: usize = 16;

/// Squared Euclidean distance; callers guarantee equal lengths.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Point ids, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap holding the best `k` candidates seen so far.
struct Candidates {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn worst(&self) -> Option<&Candidate> {
        self.heap.peek()
    }

    fn offer(&mut self, c: Candidate) {
        if !self.is_full() {
            self.heap.push(c);
        } else if self.worst().is_some_and(|w| c < *w) {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    fn into_sorted(self) -> Vec<(usize, f64)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.id, c.dist2.sqrt()))
            .collect()
    }
}

impl KdTree {
    /// Builds a tree over row-major `points` of dimension `dim`. Point ids are
    /// row positions.
    pub fn build(points: Vec<f64>, dim: usize) -> Result<Self> {
        Self::build_with_leaf_size(points, dim, LEAF_SIZE)
    }

    pub fn build_with_leaf_size(points: Vec<f64>, dim: usize, leaf_size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("k-d tree dimension must be at least 1".into()));
        }
        if points.is_empty() {
            return Err(Error::Invalid("cannot build a k-d tree over zero points".into()));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} coordinates is not a multiple of dimension {dim}",
                points.len()
            )));
        }
        if leaf_size == 0 {
            return Err(Error::Invalid("leaf size must be at least 1".into()));
        }
        let n = points.len() / dim;
        let mut tree = KdTree {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        tree.build_node(0, n);
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= self.leaf_size {
            return slot;
        }

        let (split_dim, spread) = (0..self.dim)
            .map(|d| {
                let (lo, hi) =
                    self.order[start..end]
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                            let v = self.points[i * self.dim + d];
                            (lo.min(v), hi.max(v))
                        });
                (d, hi - lo)
            })
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if spread <= 0.0 {
            // all points coincide
            return slot;
        }

        let mid = start + (end - start) / 2;
        let dim = self.dim;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + split_dim]
                .total_cmp(&points[b * dim + split_dim])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] * dim + split_dim];

        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            dim: split_dim,
            value,
            left,
            right,
        };
        slot
    }

    /// The `min(k, n-1)` nearest points to point `query_id`, excluding the
    /// point itself, sorted by distance then id.
    pub fn knn_query(&self, query_id: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query_id >= self.len() {
            return Err(Error::Invalid(format!(
                "unknown query id {query_id} (tree has {} points)",
                self.len()
            )));
        }
        let k = k.min(self.len() - 1);
        if k == 0 {
            return Ok(Vec::new());
        }
        let query = self.point(query_id);
        let mut best = Candidates::new(k);
        self.search(0, query, query_id, &mut best);
        Ok(best.into_sorted())
    }

    fn search(&self, node: usize, query: &[f64], exclude: usize, best: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    if id == exclude {
                        continue;
                    }
                    best.offer(Candidate {
                        dist2: squared_distance(query, self.point(id)),
                        id,
                    });
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, exclude, best);
                // `<=` keeps equal-distance points reachable for the id tie rule
                let visit_far = !best.is_full() || best.worst().is_some_and(|w| diff * diff <= w.dist2);
                if visit_far {
                    self.search(far, query, exclude, best);
                }
            }
        }
    }
}

/// Full-scan k-NN with the same contract as [`KdTree::knn_query`].
pub fn brute_force_knn(points: &[f64], dim: usize, query_id: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape("points are not a multiple of the dimension".into()));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if query_id >= n {
        return Err(Error::Invalid(format!("unknown query id {query_id} ({n} points)")));
    }
    let query = &points[query_id * dim..(query_id + 1) * dim];
    let mut all: Vec<Candidate> = (0..n)
        .filter(|&id| id != query_id)
        .map(|id| Candidate {
            dist2: squared_distance(query, &points[id * dim..(id + 1) * dim]),
            id,
        })
        .collect();
    all.sort();
    all.truncate(k.min(n - 1));
    Ok(all.into_iter().map(|c| (c.id, c.dist2.sqrt())).collect())
}
