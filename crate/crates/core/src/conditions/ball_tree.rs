//! Exact Euclidean k-nearest-neighbour search over nested hyperspheres.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::{Error, Result};

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    centroid: Vec<f64>,
    radius: f64,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct BallTree {
    dim: usize,
    points: Vec<f64>,
    /// Point indices, permuted so every node owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

/// Result of a k-NN query, ascending by distance then index.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub hits: Vec<(usize, f64)>,
    /// Set when `k` exceeded the number of stored points.
    pub truncated: bool,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl BallTree {
    pub fn build(points: &[Vec<f64>], leaf_size: usize) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or(Error::Empty("ball tree point set"))?;
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::LengthMismatch {
                what: "ball tree point dimension",
                left: bad.len(),
                right: dim,
            });
        }
        let mut tree = BallTree {
            dim,
            points: points.iter().flatten().copied().collect(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size: leaf_size.max(1),
        };
        tree.build_node(0, points.len());
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

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let n = (end - start) as f64;
        let mut centroid = vec![0.0; self.dim];
        for &i in &self.order[start..end] {
            for (c, x) in centroid.iter_mut().zip(self.point(i)) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n);
        let radius = self.order[start..end]
            .iter()
            .map(|&i| euclidean(self.point(i), &centroid))
            .fold(0.0, f64::max);

        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            centroid,
            radius,
            children: None,
        });
        if end - start <= self.leaf_size {
            return id;
        }

        let (split_dim, spread) = (0..self.dim)
            .map(|d| {
                let (lo, hi) =
                    self.order[start..end]
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                            let x = self.points[i * self.dim + d];
                            (lo.min(x), hi.max(x))
                        });
                (d, hi - lo)
            })
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if spread <= 0.0 {
            // all points coincide
            return id;
        }

        let mid = (end - start) / 2;
        let points = &self.points;
        let dim = self.dim;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a * dim + split_dim]
                .total_cmp(&points[b * dim + split_dim])
                .then(a.cmp(&b))
        });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Exact k nearest neighbours; ties are broken by lower index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Neighbors> {
        if query.len() != self.dim {
            return Err(Error::LengthMismatch {
                what: "query dimension",
                left: query.len(),
                right: self.dim,
            });
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let truncated = k > self.len();
        let k = k.min(self.len());
        let mut best: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        let hits = best.into_sorted_vec().into_iter().map(|c| (c.1, c.0)).collect();
        Ok(Neighbors { hits, truncated })
    }

    fn lower_bound(&self, node: usize, query: &[f64]) -> f64 {
        let n = &self.nodes[node];
        (euclidean(query, &n.centroid) - n.radius).max(0.0)
    }

    fn search(&self, node: usize, query: &[f64], k: usize, best: &mut BinaryHeap<Candidate>) {
        if best.len() == k {
            let worst = best.peek().expect("non-empty").0;
            // slack keeps rounding in the bound from pruning an exact tie
            if self.lower_bound(node, query) * (1.0 - 1e-12) > worst {
                return;
            }
        }
        let n = &self.nodes[node];
        match n.children {
            None => {
                for &i in &self.order[n.start..n.end] {
                    let c = Candidate(euclidean(query, self.point(i)), i);
                    if best.len() < k {
                        best.push(c);
                    } else if c < *best.peek().expect("non-empty") {
                        best.pop();
                        best.push(c);
                    }
                }
            }
            Some((l, r)) => {
                let (dl, dr) = (self.lower_bound(l, query), self.lower_bound(r, query));
                let (first, second) = if dl <= dr { (l, r) } else { (r, l) };
                self.search(first, query, k, best);
                self.search(second, query, k, best);
            }
        }
    }

    #[cfg(test)]
    fn leaves(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.children.is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec<f64>], q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (i, d)
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_point_tree() {
        let t = BallTree::build(&[vec![1.0, 2.0]], 16).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.nodes[0].radius, 0.0);
        let r = t.nearest(&[0.0, 0.0], 3).unwrap();
        assert!(r.truncated);
        assert_eq!(r.hits.len(), 1);
    }

    #[test]
    fn hand_distances() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]];
        let t = BallTree::build(&pts, 1).unwrap();
        let r = t.nearest(&[1.0, 0.0], 2).unwrap();
        assert_eq!(r.hits, vec![(0, 1.0), (1, 2.0)]);
        assert!(!r.truncated);
        assert_eq!(t.nearest(&[3.0, 0.0], 1).unwrap().hits, vec![(1, 0.0)]);
    }

    #[test]
    fn errors() {
        assert!(BallTree::build(&[], 4).is_err());
        assert!(BallTree::build(&[vec![1.0], vec![1.0, 2.0]], 4).is_err());
        let t = BallTree::build(&[vec![1.0]], 4).unwrap();
        assert!(t.nearest(&[1.0, 2.0], 1).is_err());
        assert!(t.nearest(&[1.0], 0).is_err());
    }

    #[test]
    fn duplicates_and_ties_prefer_lower_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = random_points(&mut rng, 50, 3);
        pts.extend(pts.clone());
        let t = BallTree::build(&pts, 4).unwrap();
        let r = t.nearest(&pts[60], 2).unwrap();
        assert_eq!(r.hits, vec![(10, 0.0), (60, 0.0)]);
    }

    #[test]
    fn structure_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 500, 5);
        let t = BallTree::build(&pts, 8).unwrap();
        let mut seen = vec![0usize; pts.len()];
        for leaf in t.leaves() {
            for &i in &t.order[leaf.start..leaf.end] {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        for n in &t.nodes {
            for &i in &t.order[n.start..n.end] {
                assert!(euclidean(&pts[i], &n.centroid) <= n.radius);
            }
        }
    }

    #[test]
    fn matches_linear_scan_in_100d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 1000, 100);
        let t = BallTree::build(&pts, DEFAULT_LEAF_SIZE).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(t.nearest(&q, 1).unwrap().hits, brute(&pts, &q, 1));
        }
    }

    #[test]
    fn translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 300, 4);
        let shift = [3.5, -2.0, 0.25, 10.0];
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        let (a, b) = (BallTree::build(&pts, 8).unwrap(), BallTree::build(&moved, 8).unwrap());
        for _ in 0..50 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qm: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let ia: Vec<usize> = a.nearest(&q, 5).unwrap().hits.iter().map(|h| h.0).collect();
            let ib: Vec<usize> = b.nearest(&qm, 5).unwrap().hits.iter().map(|h| h.0).collect();
            assert_eq!(ia, ib);
        }
    }
}
