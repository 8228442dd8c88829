//! Exact k-nearest-neighbour search over training latent codes (ball tree,
//! Euclidean metric).
//!
//! Results are ordered by `(distance, id)`, so ties resolve to the lower
//! point id and output matches a linear scan exactly.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::container::{Container, ContainerError};

pub const DEFAULT_LEAF_SIZE: usize = 32;
const SECTION: &str = "NEIGHBOR";

#[derive(Debug, Error)]
pub enum NeighborError {
    #[error("cannot build a neighbor index from zero points")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("{labels} labels for {points} points")]
    LabelCount { labels: usize, points: usize },
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("query has dimension {got}, index has {expected}")]
    QueryDim { got: usize, expected: usize },
    #[error("k = {k} outside 1..={n}")]
    K { k: usize, n: usize },
    #[error("leaf_size must be positive")]
    LeafSize,
    #[error("malformed NEIGHBOR section: {0}")]
    Section(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
    pub label: usize,
}

/// The label set of the k nearest neighbours, with per-label counts kept
/// for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Support {
    pub labels: BTreeSet<usize>,
    pub counts: BTreeMap<usize, usize>,
    pub neighbors: Vec<Neighbor>,
}

impl Support {
    pub fn from_neighbors(neighbors: Vec<Neighbor>) -> Self {
        let mut counts = BTreeMap::new();
        for n in &neighbors {
            *counts.entry(n.label).or_insert(0) += 1;
        }
        Self {
            labels: counts.keys().copied().collect(),
            counts,
            neighbors,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    centroid: Vec<f64>,
    radius: f64,
    /// Range into `order`.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct NeighborIndex {
    dim: usize,
    points: Vec<f32>,
    labels: Vec<usize>,
    leaf_size: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist_f64(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Bounded list of the best `(squared distance, id)` pairs, ascending.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }

    fn offer(&mut self, d2: f64, id: usize) {
        let key = (d2, id);
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (key.0, key.1) >= (last.0, last.1) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&(d, i)| (d, i) < key);
        self.items.insert(pos, key);
    }
}

impl NeighborIndex {
    /// Builds the tree over `points` (row-major, `labels.len()` rows of `dim`).
    pub fn build(points: Vec<f32>, labels: Vec<usize>, dim: usize, leaf_size: usize) -> Result<Self, NeighborError> {
        if dim == 0 {
            return Err(NeighborError::ZeroDim);
        }
        if leaf_size == 0 {
            return Err(NeighborError::LeafSize);
        }
        if points.len() % dim != 0 {
            return Err(NeighborError::Ragged { len: points.len(), dim });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(NeighborError::Empty);
        }
        if labels.len() != n {
            return Err(NeighborError::LabelCount {
                labels: labels.len(),
                points: n,
            });
        }
        if let Some(i) = points.chunks(dim).position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(NeighborError::NonFinite(i));
        }
        let mut index = Self {
            dim,
            points,
            labels,
            leaf_size,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, n);
        Ok(index)
    }

    fn point(&self, id: usize) -> &[f32] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let dim = self.dim;
        let count = (end - start) as f64;
        let mut centroid = vec![0.0f64; dim];
        for &id in &self.order[start..end] {
            for (c, &v) in centroid.iter_mut().zip(self.point(id)) {
                *c += v as f64;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= count);
        let radius = self.order[start..end]
            .iter()
            .map(|&id| sq_dist_f64(self.point(id), &centroid))
            .fold(0.0f64, f64::max)
            .sqrt();
        let slot = self.nodes.len();
        self.nodes.push(Node {
            centroid,
            radius,
            start,
            end,
            children: None,
        });
        if end - start <= self.leaf_size {
            return slot;
        }
        // Split at the median of the coordinate with the largest spread.
        let axis = (0..dim)
            .map(|d| {
                let (lo, hi) = self.order[start..end].iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &id| {
                    let v = self.points[id * dim + d];
                    (lo.min(v), hi.max(v))
                });
                (hi as f64 - lo as f64, d)
            })
            .fold((-1.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
            .1;
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a * dim + axis]
                .total_cmp(&points[b * dim + axis])
                .then(a.cmp(&b))
        });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[slot].children = Some((left, right));
        slot
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn points(&self) -> &[f32] {
        &self.points
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<(), NeighborError> {
        if query.len() != self.dim {
            return Err(NeighborError::QueryDim {
                got: query.len(),
                expected: self.dim,
            });
        }
        if k == 0 || k > self.len() {
            return Err(NeighborError::K { k, n: self.len() });
        }
        Ok(())
    }

    /// The `k` nearest points, ascending by distance then id.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, NeighborError> {
        self.check_query(query, k)?;
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        self.search(0, query, &mut best);
        Ok(best
            .items
            .into_iter()
            .map(|(d2, id)| Neighbor {
                id,
                distance: d2.sqrt(),
                label: self.labels[id],
            })
            .collect())
    }

    fn search(&self, node: usize, q: &[f32], best: &mut Best) {
        let n = &self.nodes[node];
        if let Some(worst) = best.worst() {
            let lower = sq_dist_f64(q, &n.centroid).sqrt() - n.radius;
            // Slack covers rounding in the centroid and radius; pruning must
            // never discard a point that could tie the current worst.
            let slack = 1e-9 * (1.0 + worst.sqrt() + n.radius);
            if lower - slack > worst.sqrt() {
                return;
            }
        }
        match n.children {
            None => {
                for &id in &self.order[n.start..n.end] {
                    best.offer(sq_dist(q, self.point(id)), id);
                }
            }
            Some((l, r)) => {
                let dl = sq_dist_f64(q, &self.nodes[l].centroid);
                let dr = sq_dist_f64(q, &self.nodes[r].centroid);
                let (first, second) = if dl <= dr { (l, r) } else { (r, l) };
                self.search(first, q, best);
                self.search(second, q, best);
            }
        }
    }

    /// Label set of the `k` nearest neighbours.
    pub fn support(&self, query: &[f32], k: usize) -> Result<Support, NeighborError> {
        Ok(Support::from_neighbors(self.knn(query, k)?))
    }

    /// Verifies the structural invariants: every point sits in exactly one
    /// leaf and within the radius of every node that contains it.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = vec![0usize; self.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &id in &self.order[node.start..node.end] {
                let d = sq_dist_f64(self.point(id), &node.centroid).sqrt();
                if d > node.radius * (1.0 + 1e-12) + 1e-12 {
                    return Err(format!("point {id} at distance {d} outside node {i} radius {}", node.radius));
                }
                if node.children.is_none() {
                    seen[id] += 1;
                }
            }
            if let Some((l, r)) = node.children {
                let (a, b) = (&self.nodes[l], &self.nodes[r]);
                if a.start != node.start || a.end != b.start || b.end != node.end {
                    return Err(format!("node {i} children do not partition its range"));
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(id) => Err(format!("point {id} is in {} leaves", seen[id])),
            None => Ok(()),
        }
    }

    /// Stores points, labels and leaf size; the tree is rebuilt on load.
    pub fn write_to(&self, c: &mut Container) {
        c.set_section(
            SECTION,
            serde_json::json!({ "leaf_size": self.leaf_size, "dim": self.dim, "count": self.len() }),
        );
        c.push_f32("neighbor.points", &[self.len(), self.dim], self.points.clone());
        c.push_u32(
            "neighbor.labels",
            &[self.len()],
            self.labels.iter().map(|&l| l as u32).collect(),
        );
    }

    pub fn read_from(c: &Container) -> Result<Self, NeighborError> {
        let meta = c.section(SECTION)?;
        let field = |name: &str| {
            meta.get(name)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| NeighborError::Section(format!("missing `{name}`")))
        };
        let (leaf_size, dim) = (field("leaf_size")?, field("dim")?);
        let (_, points) = c.f32("neighbor.points")?;
        let (_, labels) = c.u32("neighbor.labels")?;
        Self::build(
            points.to_vec(),
            labels.iter().map(|&l| l as usize).collect(),
            dim,
            leaf_size,
        )
    }
}

/// Linear-scan reference: all points sorted by `(distance, id)`, truncated to `k`.
pub fn brute_force_knn(points: &[f32], labels: &[usize], dim: usize, query: &[f32], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<(f64, usize)> = points
        .chunks(dim)
        .enumerate()
        .map(|(i, p)| (sq_dist(query, p), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter()
        .map(|(d2, id)| Neighbor {
            id,
            distance: d2.sqrt(),
            label: labels[id],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_example_orders_by_distance() {
        // labels a=0, b=1
        let idx = NeighborIndex::build(vec![0.0, 1.0, 2.0], vec![0, 1, 1], 1, 1).unwrap();
        let nn = idx.knn(&[0.9], 2).unwrap();
        assert_eq!(nn.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(nn.iter().map(|n| n.label).collect::<Vec<_>>(), vec![1, 0]);
        let s = idx.support(&[0.9], 2).unwrap();
        assert_eq!(s.labels, BTreeSet::from([0, 1]));
        assert_eq!(idx.support(&[0.9], 1).unwrap().labels.len(), 1);
    }

    #[test]
    fn single_point_and_exact_match() {
        let idx = NeighborIndex::build(vec![3.0, 4.0], vec![7], 2, 32).unwrap();
        let nn = idx.knn(&[0.0, 0.0], 1).unwrap();
        assert_eq!(nn[0].id, 0);
        assert!((nn[0].distance - 5.0).abs() < 1e-12);
        let nn = idx.knn(&[3.0, 4.0], 1).unwrap();
        assert_eq!(nn[0].distance, 0.0);
    }

    #[test]
    fn ties_resolve_to_lower_id() {
        let idx = NeighborIndex::build(vec![1.0, -1.0, 1.0, -1.0], vec![0, 1, 2, 3], 1, 1).unwrap();
        let nn = idx.knn(&[0.0], 4).unwrap();
        assert_eq!(nn.iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn errors() {
        assert!(matches!(NeighborIndex::build(vec![], vec![], 2, 4), Err(NeighborError::Empty)));
        assert!(matches!(
            NeighborIndex::build(vec![1.0, 2.0, 3.0], vec![0], 2, 4),
            Err(NeighborError::Ragged { .. })
        ));
        assert!(matches!(
            NeighborIndex::build(vec![f32::NAN], vec![0], 1, 4),
            Err(NeighborError::NonFinite(0))
        ));
        let idx = NeighborIndex::build(vec![0.0, 1.0], vec![0, 0], 1, 4).unwrap();
        assert!(matches!(idx.knn(&[0.0], 3), Err(NeighborError::K { k: 3, n: 2 })));
        assert!(matches!(idx.knn(&[0.0], 0), Err(NeighborError::K { .. })));
        assert!(matches!(idx.knn(&[0.0, 1.0], 1), Err(NeighborError::QueryDim { .. })));
    }
}
