//! Exact nearest-neighbor index over a point cloud.
//!
//! A k-d tree with median splits on the widest axis. Queries are exact, never
//! approximate, and ties in distance are broken by the lower point index so
//! results are fully deterministic. The tree copies the coordinates; the
//! source cloud can be dropped after construction.

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Split { axis: usize, value: f64, right: u32 },
    Leaf { start: u32, len: u32 },
}

/// Immutable spatial index supporting exact k-NN and radius queries.
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Vector3<f64>>,
    /// Permutation of point indices into leaf buckets.
    order: Vec<u32>,
    nodes: Vec<Node>,
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Builds an index over the cloud. The cloud must be non-empty.
pub fn build_index(cloud: &PointCloud) -> Result<NnIndex> {
    NnIndex::build(&cloud.points)
}

impl NnIndex {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("cannot index an empty cloud".into()));
        }
        let mut index = NnIndex {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        index.build_recursive(0, points.len());
        index
            .nodes
            .shrink_to_fit();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    fn build_recursive(&mut self, start: usize, end: usize) -> usize {
        let pos = self.nodes.len();
        let len = end - start;

        let mut axis = 0;
        let mut extent = 0.0;
        if len > LEAF_SIZE {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &i in &self.order[start..end] {
                let p = &self.points[i as usize];
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            for a in 0..3 {
                if hi[a] - lo[a] > extent {
                    extent = hi[a] - lo[a];
                    axis = a;
                }
            }
        }

        // Coincident points (zero extent) cannot be split; keep them in one
        // bucket regardless of size.
        if len <= LEAF_SIZE || extent == 0.0 {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                len: len as u32,
            });
            return pos;
        }

        let mid = len / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let value = self.points[self.order[start + mid] as usize][axis];

        self.nodes.push(Node::Split {
            axis,
            value,
            right: 0,
        });
        let left = self.build_recursive(start, start + mid);
        debug_assert_eq!(left, pos + 1);
        let right = self.build_recursive(start + mid, end);
        if let Node::Split { right: r, .. } = &mut self.nodes[pos] {
            *r = right as u32;
        }
        pos
    }

    /// The `min(k, N)` nearest neighbors of `query`, as `(point index,
    /// squared distance)` sorted ascending by distance, ties by lower index.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.knn_excluding(query, k, None)
    }

    /// Like [`NnIndex::knn`] but skipping one point index, used for
    /// neighborhoods that must not contain the query point itself.
    pub fn knn_excluding(
        &self,
        query: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut best);
        best.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(f64, u32)>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &i in &self.order[*start as usize..(*start + *len) as usize] {
                    if exclude == Some(i as usize) {
                        continue;
                    }
                    let d2 = dist2(query, &self.points[i as usize]);
                    let cand = (d2, i);
                    if best.len() < k || cand < *best.last().unwrap() {
                        let pos = best.partition_point(|entry| *entry < cand);
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (node + 1, *right as usize)
                } else {
                    (*right as usize, node + 1)
                };
                self.search(near, query, k, exclude, best);
                // The far side may still hold an equal-distance, lower-index
                // candidate, so the bound check is inclusive.
                if best.len() < k || diff * diff <= best.last().unwrap().0 {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }

    /// All points with squared distance `<= radius^2`, sorted ascending by
    /// distance, ties by lower index.
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let r2 = radius * radius;
        let mut hits: Vec<(f64, u32)> = Vec::new();
        self.radius_search(0, query, r2, &mut hits);
        hits.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        hits.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    fn radius_search(&self, node: usize, query: &Vector3<f64>, r2: f64, hits: &mut Vec<(f64, u32)>) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &i in &self.order[*start as usize..(*start + *len) as usize] {
                    let d2 = dist2(query, &self.points[i as usize]);
                    if d2 <= r2 {
                        hits.push((d2, i));
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (node + 1, *right as usize)
                } else {
                    (*right as usize, node + 1)
                };
                self.radius_search(near, query, r2, hits);
                if diff * diff <= r2 {
                    self.radius_search(far, query, r2, hits);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn brute_force_knn(
        points: &[Vector3<f64>],
        query: &Vector3<f64>,
        k: usize,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(query, p), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        all.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    #[test]
    fn single_point_cloud() {
        let index = NnIndex::build(&[Vector3::new(1.0, 2.0, 3.0)]).unwrap();
        let hits = index.knn(&Vector3::new(9.0, 9.0, 9.0), 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 0);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(NnIndex::build(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn k_larger_than_n_clamps() {
        let points = random_points(5, 1);
        let index = NnIndex::build(&points).unwrap();
        let hits = index.knn(&Vector3::zeros(), 32);
        assert_eq!(hits.len(), 5);
    }

    #[test]
    fn query_on_indexed_point_hits_distance_zero() {
        let points = random_points(64, 2);
        let index = NnIndex::build(&points).unwrap();
        let hits = index.knn(&points[17], 3);
        assert_eq!(hits[0], (17, 0.0));
    }

    #[test]
    fn equidistant_ties_break_by_lower_index() {
        let points = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let index = NnIndex::build(&points).unwrap();
        let hits = index.knn(&Vector3::zeros(), 2);
        assert_eq!(hits[0].0, 0);
        assert_eq!(hits[1].0, 1);
    }

    #[test]
    fn coincident_points_are_ordered_by_index() {
        let points = vec![Vector3::new(0.5, 0.5, 0.5); 50];
        let index = NnIndex::build(&points).unwrap();
        let hits = index.knn(&Vector3::zeros(), 5);
        let ids: Vec<usize> = hits.iter().map(|h| h.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        for seed in 0..4 {
            let points = random_points(256, seed);
            let index = NnIndex::build(&points).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            for _ in 0..50 {
                let q = Vector3::new(
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                );
                for k in [1, 8] {
                    assert_eq!(index.knn(&q, k), brute_force_knn(&points, &q, k));
                }
            }
        }
    }

    #[test]
    fn excluding_removes_only_the_named_point() {
        let points = random_points(64, 3);
        let index = NnIndex::build(&points).unwrap();
        let hits = index.knn_excluding(&points[10], 8, Some(10));
        assert_eq!(hits.len(), 8);
        assert!(hits.iter().all(|h| h.0 != 10));
    }

    #[test]
    fn radius_query_matches_brute_force() {
        let points = random_points(200, 4);
        let index = NnIndex::build(&points).unwrap();
        let q = Vector3::new(0.1, -0.2, 0.3);
        let r = 0.4;
        let got = index.within_radius(&q, r);
        let mut expected: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d2 = dist2(&q, p);
                (d2 <= r * r).then_some((i, d2))
            })
            .collect();
        expected.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        assert_eq!(got, expected);
    }
}
