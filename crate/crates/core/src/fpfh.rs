//! Fast Point Feature Histograms.
//!
//! Each point gets three angular histograms (alpha, phi, theta) computed in the
//! Darboux frame of every (point, neighbor) pair. The simplified histogram
//! (SPFH) of a point is then blended with its neighbors' SPFHs using inverse
//! distance weights, and every angular block is scaled to sum to 100.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{cross, dot, norm, scale, sub, FeatureMatrix, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::neighbors::KdTree;
use crate::voxel::voxel_centroids;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpfhConfig {
    pub normal_radius: f64,
    pub feature_radius: f64,
    pub bins_per_angle: usize,
    /// Normals are flipped to face this point.
    pub viewpoint: Point3,
    /// Voxel leaf for centroid downsampling before descriptor computation.
    pub leaf_size: Option<f64>,
}

impl Default for FpfhConfig {
    fn default() -> Self {
        Self {
            normal_radius: 0.02,
            feature_radius: 0.04,
            bins_per_angle: 11,
            viewpoint: [0.0; 3],
            leaf_size: Some(0.005),
        }
    }
}

impl FpfhConfig {
    pub fn dim(&self) -> usize {
        3 * self.bins_per_angle
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.normal_radius > 0.0) || !(self.feature_radius > 0.0) {
            return Err(Error::InvalidArgument("FPFH radii must be positive".into()));
        }
        if self.bins_per_angle == 0 {
            return Err(Error::InvalidArgument(
                "bins_per_angle must be positive".into(),
            ));
        }
        if let Some(leaf) = self.leaf_size {
            if !(leaf > 0.0) {
                return Err(Error::InvalidArgument("leaf size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Minimum number of other points a normal estimate needs.
pub const MIN_NORMAL_NEIGHBORS: usize = 3;

fn normal_from_neighborhood(
    points: impl Iterator<Item = Point3> + Clone,
    center: Point3,
    viewpoint: Point3,
) -> Option<Point3> {
    let mut mean = [0.0; 3];
    let mut n = 0usize;
    for p in points.clone() {
        mean = crate::cloud::add(mean, p);
        n += 1;
    }
    let mean = scale(mean, 1.0 / n as f64);
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = Vector3::from(sub(p, mean));
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(imin);
    let len = v.norm();
    if !(len > 0.0) {
        return None;
    }
    let mut normal = [v[0] / len, v[1] / len, v[2] / len];
    if dot(normal, sub(viewpoint, center)) < 0.0 {
        normal = scale(normal, -1.0);
    }
    Some(normal)
}

/// Unit normal per cloud entry; `None` flags a degenerate neighborhood
/// (fewer than three other points within `radius`) or an invalid entry.
///
/// The normal is the smallest-eigenvalue eigenvector of the covariance of the
/// point and its radius neighbors, oriented towards `viewpoint`.
pub fn estimate_normals(
    cloud: &PointCloud,
    radius: f64,
    viewpoint: Point3,
) -> Result<Vec<Option<Point3>>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(
            "normal radius must be positive".into(),
        ));
    }
    let tree = KdTree::from_cloud(cloud);
    Ok(normals_with_tree(cloud, &tree, radius, viewpoint))
}

fn normals_with_tree(
    cloud: &PointCloud,
    tree: &KdTree,
    radius: f64,
    viewpoint: Point3,
) -> Vec<Option<Point3>> {
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if !cloud.is_valid(i) {
                return None;
            }
            let p = cloud.point(i);
            let nb = tree.within(p, radius, Some(i));
            if nb.len() < MIN_NORMAL_NEIGHBORS {
                return None;
            }
            let pts = std::iter::once(p).chain(nb.iter().map(|&j| cloud.point(j)));
            normal_from_neighborhood(pts, p, viewpoint)
        })
        .collect()
}

/// Darboux-frame angles `(alpha, phi, theta)` between an oriented pair.
///
/// The source of the frame is whichever point's normal makes the smaller
/// angle with the connecting line. Returns `None` for coincident points.
pub fn pair_features(p1: Point3, n1: Point3, p2: Point3, n2: Point3) -> Option<(f64, f64, f64)> {
    let mut dp = sub(p2, p1);
    let len = norm(dp);
    if !(len > 0.0) {
        return None;
    }
    let a1 = dot(n1, dp) / len;
    let a2 = dot(n2, dp) / len;
    let (src, dst, phi) = if a1.abs().min(1.0).acos() > a2.abs().min(1.0).acos() {
        dp = scale(dp, -1.0);
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    // v is left at zero when the source normal is parallel to the pair line.
    let v = cross(dp, src);
    let vlen = norm(v);
    let v = if vlen > 1e-12 * len {
        scale(v, 1.0 / vlen)
    } else {
        [0.0; 3]
    };
    let w = cross(src, v);
    let alpha = dot(v, dst);
    let theta = dot(w, dst).atan2(dot(src, dst));
    Some((alpha, phi, theta))
}

/// Uniform bin of `x` over `[lo, hi]`, clamped to the last bin at `hi`.
pub fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let b = ((x - lo) / (hi - lo) * bins as f64).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

fn spfh_with_tree(
    cloud: &PointCloud,
    tree: &KdTree,
    normals: &[Option<Point3>],
    index: usize,
    radius: f64,
    bins: usize,
) -> Option<Vec<f64>> {
    let n1 = normals[index]?;
    let p1 = cloud.point(index);
    let mut hist = vec![0.0; 3 * bins];
    let mut count = 0usize;
    for j in tree.within(p1, radius, Some(index)) {
        let Some(n2) = normals[j] else { continue };
        let Some((alpha, phi, theta)) = pair_features(p1, n1, cloud.point(j), n2) else {
            continue;
        };
        hist[bin_of(alpha, -1.0, 1.0, bins)] += 1.0;
        hist[bins + bin_of(phi, -1.0, 1.0, bins)] += 1.0;
        hist[2 * bins + bin_of(theta, -PI, PI, bins)] += 1.0;
        count += 1;
    }
    if count == 0 {
        return None;
    }
    hist.iter_mut().for_each(|h| *h /= count as f64);
    Some(hist)
}

/// Simplified point feature histogram of one point, each block summing to 1.
///
/// `None` when the point has no usable neighbor within `radius`.
pub fn spfh(
    cloud: &PointCloud,
    normals: &[Option<Point3>],
    index: usize,
    radius: f64,
    bins: usize,
) -> Option<Vec<f64>> {
    let tree = KdTree::from_cloud(cloud);
    spfh_with_tree(cloud, &tree, normals, index, radius, bins)
}

/// FPFH descriptors given precomputed normals. Degenerate points get zero rows.
pub fn fpfh_with_normals(
    cloud: &PointCloud,
    normals: &[Option<Point3>],
    cfg: &FpfhConfig,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if normals.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} normals for {} points",
            normals.len(),
            cloud.len()
        )));
    }
    let bins = cfg.bins_per_angle;
    let tree = KdTree::from_cloud(cloud);
    let spfhs: Vec<Option<Vec<f64>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| spfh_with_tree(cloud, &tree, normals, i, cfg.feature_radius, bins))
        .collect();

    let rows: Vec<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let Some(own) = &spfhs[i] else {
                return vec![0.0; 3 * bins];
            };
            let p = cloud.point(i);
            let mut acc = vec![0.0; 3 * bins];
            let mut k = 0usize;
            for (j, d2) in tree.within_with_dist(p, cfg.feature_radius, Some(i)) {
                if normals[j].is_none() || d2 <= 0.0 {
                    continue;
                }
                k += 1;
                if let Some(h) = &spfhs[j] {
                    let w = 1.0 / d2.sqrt();
                    for (a, v) in acc.iter_mut().zip(h) {
                        *a += w * v;
                    }
                }
            }
            let mut row = own.clone();
            if k > 0 {
                for (r, a) in row.iter_mut().zip(&acc) {
                    *r += a / k as f64;
                }
            }
            for block in row.chunks_mut(bins) {
                let s: f64 = block.iter().sum();
                if s > 0.0 {
                    block.iter_mut().for_each(|v| *v *= 100.0 / s);
                }
            }
            row
        })
        .collect();
    let mut out = FeatureMatrix::zeros(cloud.len(), 3 * bins);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

/// Normals plus FPFH descriptors on the cloud as given (no downsampling).
pub fn fpfh(cloud: &PointCloud, cfg: &FpfhConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let normals = estimate_normals(cloud, cfg.normal_radius, cfg.viewpoint)?;
    fpfh_with_normals(cloud, &normals, cfg)
}

/// Descriptors computed on voxel-centroid downsampled points, then assigned
/// back to every original point from its nearest centroid.
///
/// Falls back to [`fpfh`] when `cfg.leaf_size` is `None`.
pub fn fpfh_downsampled(cloud: &PointCloud, cfg: &FpfhConfig) -> Result<FeatureMatrix> {
    let Some(leaf) = cfg.leaf_size else {
        return fpfh(cloud, cfg);
    };
    cfg.validate()?;
    let (centroids, _) = voxel_centroids(cloud, leaf)?;
    let small = PointCloud::new(centroids.clone());
    let feats = fpfh(&small, cfg)?;
    let tree = KdTree::new(&centroids);
    let mut out = FeatureMatrix::zeros(cloud.len(), cfg.dim());
    for i in cloud.valid_indices() {
        if let Some(&(j, _)) = tree.knn(cloud.point(i), 1, None).first() {
            out.row_mut(i).copy_from_slice(feats.row(j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_grid(n: usize, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push([i as f64 * spacing, j as f64 * spacing, -1.0]);
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn plane_normals_point_up_toward_origin_viewpoint() {
        let c = plane_grid(10, 0.01);
        let normals = estimate_normals(&c, 0.025, [0.0; 3]).unwrap();
        for n in normals {
            let n = n.unwrap();
            assert!((n[0]).abs() < 1e-6 && (n[1]).abs() < 1e-6);
            assert!((n[2] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_point_inward() {
        let mut pts = Vec::new();
        let golden = PI * (3.0 - 5f64.sqrt());
        let n = 600;
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            pts.push([r * t.cos(), r * t.sin(), z]);
        }
        let c = PointCloud::new(pts.clone());
        let normals = estimate_normals(&c, 0.3, [0.0; 3]).unwrap();
        for (p, n) in pts.iter().zip(normals) {
            let n = n.unwrap();
            assert!((norm(n) - 1.0).abs() < 1e-12);
            // Inward: parallel to -p.
            assert!(dot(n, *p) < -0.99);
        }
    }

    #[test]
    fn sparse_point_is_flagged() {
        let c = PointCloud::new(vec![[0.0; 3], [0.001, 0.0, 0.0], [5.0, 5.0, 5.0]]);
        let normals = estimate_normals(&c, 0.01, [0.0; 3]).unwrap();
        assert!(normals.iter().all(Option::is_none));
    }

    #[test]
    fn aligned_pair_lands_in_closed_form_bins() {
        // Both normals along the connecting line.
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let normals = vec![Some([1.0, 0.0, 0.0]), Some([1.0, 0.0, 0.0])];
        let h = spfh(&c, &normals, 0, 2.0, 11).unwrap();
        let mut want = vec![0.0; 33];
        want[5] = 1.0; // alpha = 0
        want[11 + 10] = 1.0; // phi = 1
        want[22 + 5] = 1.0; // theta = 0
        assert_eq!(h, want);
    }

    #[test]
    fn single_neighbor_gives_one_count_per_block() {
        let c = PointCloud::new(vec![[0.0; 3], [0.3, 0.2, 0.1]]);
        let normals = vec![
            Some([0.0, 0.0, 1.0]),
            Some(crate::cloud::normalize([0.1, 0.2, 1.0])),
        ];
        let h = spfh(&c, &normals, 0, 1.0, 11).unwrap();
        for block in h.chunks(11) {
            assert_eq!(block.iter().filter(|&&v| v > 0.0).count(), 1);
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn no_neighbors_gives_none() {
        let c = PointCloud::new(vec![[0.0; 3], [3.0, 0.0, 0.0]]);
        let normals = vec![Some([0.0, 0.0, 1.0]); 2];
        assert!(spfh(&c, &normals, 0, 1.0, 11).is_none());
    }

    /// Per-pair recomputation written from the textbook definition.
    fn oracle_spfh(pts: &[Point3], normals: &[Point3], i: usize, radius: f64) -> Vec<f64> {
        let mut h = vec![0.0; 33];
        let mut n = 0.0;
        for j in 0..pts.len() {
            let d = sub(pts[j], pts[i]);
            let len = norm(d);
            if j == i || len > radius {
                continue;
            }
            let (ns, nt, dir) = {
                let c1 = (dot(normals[i], d) / len).abs().acos();
                let c2 = (dot(normals[j], d) / len).abs().acos();
                if c1 <= c2 {
                    (normals[i], normals[j], scale(d, 1.0 / len))
                } else {
                    (normals[j], normals[i], scale(d, -1.0 / len))
                }
            };
            let u = ns;
            let v = crate::cloud::normalize(cross(dir, u));
            let w = cross(u, v);
            let alpha = dot(v, nt);
            let phi = dot(u, dir);
            let theta = dot(w, nt).atan2(dot(u, nt));
            let b =
                |x: f64, lo: f64, hi: f64| (((x - lo) / (hi - lo) * 11.0).floor() as usize).min(10);
            h[b(alpha, -1.0, 1.0)] += 1.0;
            h[11 + b(phi, -1.0, 1.0)] += 1.0;
            h[22 + b(theta, -PI, PI)] += 1.0;
            n += 1.0;
        }
        h.iter().map(|v| v / n).collect()
    }

    #[test]
    fn random_neighborhood_matches_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<Point3> = (0..120)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let normals: Vec<Point3> = (0..120)
            .map(|_| {
                crate::cloud::normalize([
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                ])
            })
            .collect();
        let c = PointCloud::new(pts.clone());
        let opt: Vec<Option<Point3>> = normals.iter().map(|&n| Some(n)).collect();
        for i in [0, 7, 50, 119] {
            let got = spfh(&c, &opt, i, 0.4, 11).unwrap();
            let want = oracle_spfh(&pts, &normals, i, 0.4);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_point_gets_zero_row() {
        let mut pts: Vec<Point3> = (0..25)
            .map(|i| [(i % 5) as f64 * 0.01, (i / 5) as f64 * 0.01, 0.0])
            .collect();
        pts.push([10.0, 10.0, 10.0]);
        let cfg = FpfhConfig {
            leaf_size: None,
            ..Default::default()
        };
        let f = fpfh(&PointCloud::new(pts), &cfg).unwrap();
        assert!(f.row(25).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_plane_rows_are_equal_and_blocks_sum_to_100() {
        let c = plane_grid(30, 0.005);
        let cfg = FpfhConfig {
            normal_radius: 0.012,
            feature_radius: 0.02,
            leaf_size: None,
            ..Default::default()
        };
        let f = fpfh(&c, &cfg).unwrap();
        let first = f.row(0).to_vec();
        for row in f.rows() {
            for block in row.chunks(11) {
                assert!((block.iter().sum::<f64>() - 100.0).abs() < 1e-6);
            }
            for (a, b) in row.iter().zip(&first) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsampled_rows_are_assigned_to_every_point() {
        let c = plane_grid(20, 0.002);
        let cfg = FpfhConfig {
            normal_radius: 0.012,
            feature_radius: 0.02,
            leaf_size: Some(0.005),
            ..Default::default()
        };
        let f = fpfh_downsampled(&c, &cfg).unwrap();
        assert_eq!(f.n_rows(), c.len());
        assert_eq!(f.n_cols(), 33);
        assert!(f
            .rows()
            .all(|r| (r[..11].iter().sum::<f64>() - 100.0).abs() < 1e-6));
    }
}
