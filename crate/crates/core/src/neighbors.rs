//! Exact nearest-neighbor queries over 3D points.
//!
//! A static k-d tree answers k-NN and radius queries. Results are exact and
//! ties are broken by the smaller point index, so the output is identical to
//! an exhaustive scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::cloud::{dist2, Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

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

/// Candidate ordered by (squared distance, index).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

/// Immutable k-d tree over a set of points identified by caller-chosen ids.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Tree over all points, with ids equal to their positions.
    pub fn new(points: &[Point3]) -> Self {
        Self::with_ids(points.to_vec(), (0..points.len()).collect())
    }

    /// Tree over the valid points of a cloud; ids are cloud indices.
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        let ids = cloud.valid_indices();
        let pts = ids.iter().map(|&i| cloud.point(i)).collect();
        Self::with_ids(pts, ids)
    }

    pub fn with_ids(points: Vec<Point3>, ids: Vec<usize>) -> Self {
        assert_eq!(points.len(), ids.len());
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&points, &ids, &mut order, 0, &mut nodes);
        }
        let points = order.iter().map(|&s| points[s]).collect();
        let ids = order.iter().map(|&s| ids[s]).collect();
        Self { points, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, skipping the id `exclude`, sorted by
    /// (distance, id). Returns `(id, squared distance)` pairs.
    pub fn knn(&self, query: Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.id, c.d2)).collect()
    }

    fn knn_rec(
        &self,
        node: usize,
        q: Point3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let id = self.ids[s];
                    if Some(id) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, self.points[s]),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, exclude, heap);
                // `<=` keeps equidistant points reachable for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                    self.knn_rec(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Ids of all points with squared distance `<= radius²`, ascending id.
    pub fn within(&self, query: Point3, radius: f64, exclude: Option<usize>) -> Vec<usize> {
        self.within_with_dist(query, radius, exclude)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// Like [`KdTree::within`] but also returns squared distances.
    pub fn within_with_dist(
        &self,
        query: Point3,
        radius: f64,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, query, radius * radius, exclude, &mut out);
        }
        out.sort_unstable_by_key(|&(id, _)| id);
        out
    }

    fn within_rec(
        &self,
        node: usize,
        q: Point3,
        r2: f64,
        exclude: Option<usize>,
        out: &mut Vec<(usize, f64)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let id = self.ids[s];
                    if Some(id) == exclude {
                        continue;
                    }
                    let d2 = dist2(q, self.points[s]);
                    if d2 <= r2 {
                        out.push((id, d2));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.within_rec(near, q, r2, exclude, out);
                if diff * diff <= r2 {
                    self.within_rec(far, q, r2, exclude, out);
                }
            }
        }
    }
}

fn build(
    points: &[Point3],
    ids: &[usize],
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return me;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &s in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[s][a]);
            hi[a] = hi[a].max(points[s][a]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][dim]
            .total_cmp(&points[b][dim])
            .then(ids[a].cmp(&ids[b]))
    });
    let value = points[order[mid]][dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, ids, l, offset, nodes);
    let right = build(points, ids, r, offset + mid, nodes);
    nodes[me] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    me
}

/// k nearest distinct other valid points for every entry of the cloud.
///
/// The result is aligned with the cloud's entries; invalid entries receive an
/// empty list. Neighbors are ordered by distance, ties by smaller index.
pub fn knn_search(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let n_valid = cloud.num_valid();
    if n_valid < k + 1 {
        return Err(Error::InsufficientPoints {
            needed: k + 1,
            found: n_valid,
        });
    }
    let tree = KdTree::from_cloud(cloud);
    Ok((0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if !cloud.is_valid(i) {
                return Vec::new();
            }
            tree.knn(cloud.point(i), k, Some(i))
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect())
}

/// Valid points (other than the center) within `radius`, ascending index.
pub fn radius_search(cloud: &PointCloud, center_index: usize, radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if center_index >= cloud.len() || !cloud.is_valid(center_index) {
        return Err(Error::InvalidArgument(format!(
            "center {center_index} is not a valid point"
        )));
    }
    let tree = KdTree::from_cloud(cloud);
    Ok(tree.within(cloud.point(center_index), radius, Some(center_index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line() -> PointCloud {
        PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    }

    fn brute_knn(pts: &[Point3], i: usize, k: usize) -> Vec<usize> {
        let mut c: Vec<(f64, usize)> = (0..pts.len())
            .filter(|&j| j != i)
            .map(|j| (dist2(pts[i], pts[j]), j))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn collinear_k1() {
        let nn = knn_search(&line(), 1).unwrap();
        assert_eq!(nn, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn collinear_k2() {
        let nn = knn_search(&line(), 2).unwrap();
        assert_eq!(nn, vec![vec![1, 2], vec![0, 2], vec![1, 0]]);
    }

    #[test]
    fn insufficient_points() {
        let err = knn_search(&line(), 3).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientPoints {
                needed: 4,
                found: 3
            }
        ));
    }

    #[test]
    fn ties_go_to_smaller_index() {
        // Points 1 and 2 are equidistant from 0.
        let c = PointCloud::new(vec![
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [5.0, 0.0, 0.0],
        ]);
        assert_eq!(knn_search(&c, 1).unwrap()[0], vec![1]);
    }

    #[test]
    fn random_cloud_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..500)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let cloud = PointCloud::new(pts.clone());
        let nn = knn_search(&cloud, 8).unwrap();
        for i in 0..pts.len() {
            assert_eq!(nn[i], brute_knn(&pts, i, 8), "point {i}");
        }
    }

    #[test]
    fn grid_points_with_many_ties_match_brute_force() {
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..3 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let nn = knn_search(&PointCloud::new(pts.clone()), 6).unwrap();
        for i in 0..pts.len() {
            assert_eq!(nn[i], brute_knn(&pts, i, 6));
        }
    }

    #[test]
    fn radius_examples() {
        let c = PointCloud::new(vec![[0.0; 3], [0.5, 0.0, 0.0], [0.0, 1.5, 0.0]]);
        assert_eq!(radius_search(&c, 0, 1.0).unwrap(), vec![1]);
        assert!(radius_search(&c, 0, 0.1).unwrap().is_empty());
        assert!(radius_search(&c, 0, 0.0).is_err());
        assert!(radius_search(&c, 0, -1.0).is_err());
    }

    #[test]
    fn radius_random_matches_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..400)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let cloud = PointCloud::new(pts.clone());
        for center in [0, 17, 399] {
            let got = radius_search(&cloud, center, 0.2).unwrap();
            let want: Vec<usize> = (0..pts.len())
                .filter(|&j| j != center && dist2(pts[j], pts[center]) <= 0.04)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn invalid_entries_are_skipped() {
        let pts = vec![[0.0; 3], [f64::NAN; 3], [1.0, 0.0, 0.0], [2.5, 0.0, 0.0]];
        let c = PointCloud::organized(pts, 2, 2, vec![true; 4]).unwrap();
        let nn = knn_search(&c, 1).unwrap();
        assert_eq!(nn, vec![vec![2], vec![], vec![0], vec![2]]);
    }
}
