//! Background-plane removal and noise rejection for organized scans.
//!
//! The plane is estimated by RANSAC on a strip along the image boundary, then
//! every point closer than `ransac_eps` to it is treated as background.
//! Whatever survives is optionally cleaned with DBSCAN, dropping the points it
//! labels as noise.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{add, cross, dot, norm, scale, sub, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::neighbors::KdTree;

/// The plane `{x : normal · x = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Point3,
    pub offset: f64,
}

impl Plane {
    /// Plane through `point` with the given (not necessarily unit) normal.
    ///
    /// The normal is scaled to unit length and its largest component made positive.
    pub fn from_point_normal(point: Point3, normal: Point3) -> Option<Self> {
        let len = norm(normal);
        if !(len > 0.0) || !len.is_finite() {
            return None;
        }
        let mut n = scale(normal, 1.0 / len);
        let major = (0..3)
            .max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()).then(b.cmp(&a)))
            .unwrap();
        if n[major] < 0.0 {
            n = scale(n, -1.0);
        }
        Some(Self {
            normal: n,
            offset: dot(n, point),
        })
    }

    /// Unsigned point-plane distance.
    pub fn distance(&self, p: Point3) -> f64 {
        (dot(self.normal, p) - self.offset).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub strip_width_px: usize,
    pub ransac_iters: usize,
    pub ransac_eps: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            strip_width_px: 10,
            ransac_iters: 200,
            ransac_eps: 0.005,
            dbscan_eps: 0.01,
            dbscan_min_pts: 4,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strip_width_px == 0 || self.ransac_iters == 0 || self.dbscan_min_pts == 0 {
            return Err(Error::InvalidArgument(
                "strip width, RANSAC iterations and DBSCAN min_pts must be positive".into(),
            ));
        }
        if !(self.ransac_eps > 0.0) || !(self.dbscan_eps > 0.0) {
            return Err(Error::InvalidArgument(
                "RANSAC and DBSCAN thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unorganized copy of the valid, finite entries plus the map new -> original index.
pub fn drop_invalid(cloud: &PointCloud) -> (PointCloud, Vec<usize>) {
    let map = cloud.valid_indices();
    (cloud.select(&map), map)
}

/// Indices of valid points lying within `strip_width_px` of the grid border.
pub fn boundary_strip(cloud: &PointCloud, strip_width_px: usize) -> Result<Vec<usize>> {
    let (rows, cols) = cloud.grid_shape().ok_or(Error::RequiresOrganized)?;
    let w = strip_width_px;
    Ok((0..cloud.len())
        .filter(|&i| {
            let (r, c) = (i / cols, i % cols);
            cloud.is_valid(i) && (r < w || r + w >= rows || c < w || c + w >= cols)
        })
        .collect())
}

/// Least-squares plane: centroid plus the smallest-eigenvalue direction of the covariance.
pub fn fit_plane_lsq(points: &[Point3]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    let c = scale(c, 1.0 / points.len() as f64);
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = Vector3::from(sub(*p, c));
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let n = eig.eigenvectors.column(imin);
    Plane::from_point_normal(c, [n[0], n[1], n[2]])
}

fn plane_through(a: Point3, b: Point3, c: Point3) -> Option<Plane> {
    let (u, v) = (sub(b, a), sub(c, a));
    let n = cross(u, v);
    let (lu, lv) = (norm(u), norm(v));
    if lu == 0.0 || lv == 0.0 || norm(n) <= 1e-12 * lu * lv {
        return None;
    }
    Plane::from_point_normal(a, n)
}

fn inliers_of(points: &[Point3], plane: &Plane, eps: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| plane.distance(points[i]) < eps)
        .collect()
}

/// Seeded RANSAC plane fit.
///
/// Each iteration samples three distinct points and scores the exact plane
/// through them by its inlier count (`distance < eps`). The best hypothesis
/// (earliest on ties) is refit by least squares to its inliers; the returned
/// inliers are those of the refit plane.
pub fn ransac_plane(
    points: &[Point3],
    iters: usize,
    eps: f64,
    seed: u64,
) -> Result<(Plane, Vec<usize>)> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "RANSAC needs at least 3 points, got {}",
            points.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("RANSAC eps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples: Vec<[usize; 3]> = (0..iters)
        .map(|_| {
            let s = rand::seq::index::sample(&mut rng, points.len(), 3);
            [s.index(0), s.index(1), s.index(2)]
        })
        .collect();
    let scored: Vec<Option<(Plane, usize)>> = triples
        .par_iter()
        .map(|t| {
            let plane = plane_through(points[t[0]], points[t[1]], points[t[2]])?;
            let count = points.iter().filter(|p| plane.distance(**p) < eps).count();
            Some((plane, count))
        })
        .collect();
    let mut best: Option<(Plane, usize)> = None;
    for (plane, count) in scored.into_iter().flatten() {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((plane, count));
        }
    }
    let (plane, _) =
        best.ok_or_else(|| Error::DegenerateInput("every sampled triple was collinear".into()))?;
    let consensus = inliers_of(points, &plane, eps);
    let consensus_pts: Vec<Point3> = consensus.iter().map(|&i| points[i]).collect();
    let refit = fit_plane_lsq(&consensus_pts).unwrap_or(plane);
    let inliers = inliers_of(points, &refit, eps);
    Ok((refit, inliers))
}

/// Label given to points that belong to no cluster.
pub const NOISE: i32 = -1;

/// Density-based clustering.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters grow from core points in index order and are numbered from 0
/// in that order; border points join the first cluster that reaches them.
pub fn dbscan(points: &[Point3], eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::InvalidArgument(
            "DBSCAN needs eps > 0 and min_pts >= 1".into(),
        ));
    }
    let tree = KdTree::new(points);
    let neigh: Vec<Vec<usize>> = (0..points.len())
        .into_par_iter()
        .map(|i| tree.within(points[i], eps, None))
        .collect();
    let is_core: Vec<bool> = neigh.iter().map(|n| n.len() >= min_pts).collect();

    const UNSET: i32 = i32::MIN;
    let mut labels = vec![UNSET; points.len()];
    let mut next = 0;
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..points.len() {
        if labels[seed] != UNSET || !is_core[seed] {
            continue;
        }
        labels[seed] = next;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neigh[p] {
                if labels[q] == UNSET {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for l in labels.iter_mut() {
        if *l == UNSET {
            *l = NOISE;
        }
    }
    Ok(labels)
}

/// Result of [`remove_background`]. Index lists refer to the input cloud.
#[derive(Debug, Clone)]
pub struct BackgroundRemoval {
    /// Cleaned, unorganized cloud.
    pub cloud: PointCloud,
    /// Original index of every point in `cloud`.
    pub kept: Vec<usize>,
    pub plane: Plane,
    pub background: Vec<usize>,
    /// Points dropped as DBSCAN noise after the plane was removed.
    pub noise: Vec<usize>,
}

pub fn remove_background(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<BackgroundRemoval> {
    cfg.validate()?;
    if cloud.grid_shape().is_none() {
        return Err(Error::RequiresOrganized);
    }
    let (_, valid) = drop_invalid(cloud);
    let strip = boundary_strip(cloud, cfg.strip_width_px)?;
    if strip.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "boundary strip holds {} valid points, need at least 3",
            strip.len()
        )));
    }
    let strip_pts: Vec<Point3> = strip.iter().map(|&i| cloud.point(i)).collect();
    let (plane, _) = ransac_plane(&strip_pts, cfg.ransac_iters, cfg.ransac_eps, cfg.seed)?;

    let (background, mut kept): (Vec<usize>, Vec<usize>) = valid
        .iter()
        .partition(|&&i| plane.distance(cloud.point(i)) < cfg.ransac_eps);
    if kept.is_empty() {
        return Err(Error::EmptyResult(
            "every valid point lies on the background plane".into(),
        ));
    }

    let mut noise = Vec::new();
    if cfg.dbscan_min_pts > 1 {
        let pts: Vec<Point3> = kept.iter().map(|&i| cloud.point(i)).collect();
        let labels = dbscan(&pts, cfg.dbscan_eps, cfg.dbscan_min_pts)?;
        let (keep, drop): (Vec<_>, Vec<_>) =
            kept.iter().zip(&labels).partition(|(_, &l)| l != NOISE);
        noise = drop.into_iter().map(|(&i, _)| i).collect();
        kept = keep.into_iter().map(|(&i, _)| i).collect();
        if kept.is_empty() {
            return Err(Error::EmptyResult(
                "every remaining point was rejected as noise".into(),
            ));
        }
    }

    Ok(BackgroundRemoval {
        cloud: cloud.select(&kept),
        kept,
        plane,
        background,
        noise,
    })
}
