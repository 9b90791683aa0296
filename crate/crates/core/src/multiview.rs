//! Orthographic depth rendering from fixed viewpoints and per-point feature fusion.

use crate::cloud::{
    add, cross, dot, norm, normalize, scale, sub, FeatureMatrix, Point3, PointCloud,
};
use crate::error::{Error, Result};
use crate::feat2d::{check_alignment, FeatureField};
use crate::io::Pgm;

pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (224, 224);
/// Visibility tolerance in units of pixel pitch.
pub const OCCLUSION_PITCHES: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPose {
    pub eye: Point3,
    pub target: Point3,
    pub up: Point3,
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
    pub ortho_half_extent: f64,
}

/// Where a point lands in a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates, `u` along columns and `v` along rows.
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn pixel(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (r, c) = (self.v.floor(), self.u.floor());
        (r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w)
            .then_some((r as usize, c as usize))
    }
}

impl ViewPose {
    pub fn validate(&self) -> Result<()> {
        let f = sub(self.target, self.eye);
        if !(norm(f) > 0.0) {
            return Err(Error::InvalidArgument("eye and target coincide".into()));
        }
        if !(norm(cross(f, self.up)) > 1e-12 * norm(f) * norm(self.up)) {
            return Err(Error::InvalidArgument(
                "up is parallel to the view axis".into(),
            ));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || !(self.ortho_half_extent > 0.0) {
            return Err(Error::InvalidArgument("empty image or view extent".into()));
        }
        Ok(())
    }

    /// (right, up, forward) orthonormal camera axes.
    pub fn basis(&self) -> (Point3, Point3, Point3) {
        let f = normalize(sub(self.target, self.eye));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (r, u, f)
    }

    /// Size of one pixel along the image columns, in meters.
    pub fn pixel_pitch(&self) -> f64 {
        2.0 * self.ortho_half_extent / self.image_size.1 as f64
    }

    pub fn project(&self, p: Point3) -> Projection {
        let (r, u, f) = self.basis();
        self.project_with(p, r, u, f)
    }

    fn project_with(&self, p: Point3, r: Point3, u: Point3, f: Point3) -> Projection {
        let d = sub(p, self.eye);
        let (x, y) = (dot(d, r), dot(d, u));
        let half = self.ortho_half_extent;
        let (h, w) = self.image_size;
        Projection {
            u: (x + half) / (2.0 * half) * w as f64,
            v: (half - y) / (2.0 * half) * h as f64,
            depth: dot(d, f),
        }
    }
}

/// Eyes on a Fibonacci sphere around the cloud centroid.
///
/// The sphere radius is `radius_scale` times the largest centroid distance of a
/// valid point; the orthographic window covers that radius with a 5% margin.
pub fn make_views(
    cloud: &PointCloud,
    n_views: usize,
    radius_scale: f64,
    image_size: (usize, usize),
) -> Result<Vec<ViewPose>> {
    if n_views == 0 {
        return Err(Error::InvalidArgument("n_views must be at least 1".into()));
    }
    if !(radius_scale > 0.0) {
        return Err(Error::InvalidArgument(
            "radius_scale must be positive".into(),
        ));
    }
    let c = cloud
        .centroid()
        .ok_or_else(|| Error::DegenerateInput("cannot place views around an empty cloud".into()))?;
    let mut r = 0.0f64;
    for i in cloud.valid_indices() {
        r = r.max(norm(sub(cloud.point(i), c)));
    }
    if r == 0.0 {
        r = 1e-3;
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    Ok(fibonacci_directions(n_views, golden)
        .into_iter()
        .map(|dir| {
            let up = if dir[0].abs() < 1e-9 && dir[1].abs() < 1e-9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            };
            ViewPose {
                eye: add(c, scale(dir, radius_scale * r)),
                target: c,
                up,
                image_size,
                ortho_half_extent: 1.05 * r,
            }
        })
        .collect())
}

fn fibonacci_directions(n: usize, golden: f64) -> Vec<Point3> {
    if n == 1 {
        return vec![[0.0, 0.0, 1.0]];
    }
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let s = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [s * phi.cos(), s * phi.sin(), z]
        })
        .collect()
}

/// Z-buffered depth image; `+inf` depth and index `-1` mark empty pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    h: usize,
    w: usize,
    depth: Vec<f64>,
    index: Vec<i64>,
}

impl DepthImage {
    pub fn from_parts(h: usize, w: usize, depth: Vec<f64>, index: Vec<i64>) -> Result<Self> {
        if depth.len() != h * w || index.len() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} image needs {} pixels",
                h * w
            )));
        }
        if depth
            .iter()
            .zip(&index)
            .any(|(d, &i)| d.is_finite() != (i >= 0))
        {
            return Err(Error::InvalidArgument(
                "finite depth must coincide with a point index".into(),
            ));
        }
        Ok(Self { h, w, depth, index })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn point_index(&self) -> &[i64] {
        &self.index
    }

    pub fn depth_at(&self, r: usize, c: usize) -> f64 {
        self.depth[r * self.w + c]
    }

    pub fn index_at(&self, r: usize, c: usize) -> Option<usize> {
        let i = self.index[r * self.w + c];
        (i >= 0).then_some(i as usize)
    }

    pub fn filled(&self) -> usize {
        self.index.iter().filter(|&&i| i >= 0).count()
    }

    /// 16-bit PGM of depth in millimeters; empty pixels are 0.
    pub fn to_pgm(&self) -> Pgm {
        Pgm {
            width: self.w,
            height: self.h,
            maxval: u16::MAX,
            pixels: self
                .depth
                .iter()
                .map(|&d| {
                    if d.is_finite() {
                        (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
                    } else {
                        0
                    }
                })
                .collect(),
        }
    }
}

/// Orthographic render keeping the nearest point per pixel (lower index on ties).
pub fn render_depth(cloud: &PointCloud, pose: &ViewPose) -> Result<DepthImage> {
    pose.validate()?;
    if cloud.num_valid() == 0 {
        return Err(Error::DegenerateInput(
            "cannot render an empty cloud".into(),
        ));
    }
    let (h, w) = pose.image_size;
    let (r, u, f) = pose.basis();
    let mut depth = vec![f64::INFINITY; h * w];
    let mut index = vec![-1i64; h * w];
    for i in cloud.valid_indices() {
        let pr = pose.project_with(cloud.point(i), r, u, f);
        let Some((row, col)) = pr.pixel(h, w) else {
            continue;
        };
        let k = row * w + col;
        if pr.depth < depth[k] {
            depth[k] = pr.depth;
            index[k] = i as i64;
        }
    }
    Ok(DepthImage { h, w, depth, index })
}

/// Bilinear sample of `field` at continuous field coordinates, edges clamped.
pub fn bilinear(field: &FeatureField, fy: f64, fx: f64, out: &mut [f64]) {
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let (y, x) = (clamp(fy, field.h()), clamp(fx, field.w()));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(field.h() - 1), (x0 + 1).min(field.w() - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let corners = [
        (y0, x0, (1.0 - ty) * (1.0 - tx)),
        (y0, x1, (1.0 - ty) * tx),
        (y1, x0, ty * (1.0 - tx)),
        (y1, x1, ty * tx),
    ];
    out.iter_mut().for_each(|v| *v = 0.0);
    for (cy, cx, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(field.at(cy, cx)) {
            *o += wgt * v;
        }
    }
}

/// Per-point features and visibility flags for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSamples {
    pub rows: FeatureMatrix,
    pub visible: Vec<bool>,
}

/// Samples `field` at every entry of the cloud that is visible in `image`.
///
/// A point is visible when its depth is within `occlusion_tol` of the z-buffer
/// depth at its pixel. Invalid or hidden entries get a zero row.
pub fn sample_point_features(
    cloud: &PointCloud,
    pose: &ViewPose,
    field: &FeatureField,
    image: &DepthImage,
    occlusion_tol: f64,
) -> Result<ViewSamples> {
    let (h, w) = pose.image_size;
    if (image.h, image.w) != (h, w) {
        return Err(Error::Shape("depth image does not match the pose".into()));
    }
    check_alignment(field, h, w)?;
    let (sy, sx) = ((h / field.h()) as f64, (w / field.w()) as f64);
    let (r, u, f) = pose.basis();
    let d = field.d();
    let mut rows = FeatureMatrix::zeros(cloud.len(), d);
    let mut visible = vec![false; cloud.len()];
    for i in cloud.valid_indices() {
        let pr = pose.project_with(cloud.point(i), r, u, f);
        let Some((row, col)) = pr.pixel(h, w) else {
            continue;
        };
        if pr.depth - image.depth_at(row, col) > occlusion_tol {
            continue;
        }
        visible[i] = true;
        bilinear(field, pr.v / sy - 0.5, pr.u / sx - 0.5, rows.row_mut(i));
    }
    Ok(ViewSamples { rows, visible })
}

/// Per-point mean over the views in which the point is visible.
pub fn fuse_views(views: &[ViewSamples]) -> Result<FeatureMatrix> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views to fuse".into()))?;
    let (n, d) = (first.rows.n_rows(), first.rows.n_cols());
    if views
        .iter()
        .any(|v| v.rows.n_rows() != n || v.rows.n_cols() != d || v.visible.len() != n)
    {
        return Err(Error::Shape(
            "views disagree on point count or width".into(),
        ));
    }
    let mut out = FeatureMatrix::zeros(n, d);
    for i in 0..n {
        let mut count = 0usize;
        let acc = out.row_mut(i);
        for v in views {
            if v.visible[i] {
                count += 1;
                for (a, b) in acc.iter_mut().zip(v.rows.row(i)) {
                    *a += b;
                }
            }
        }
        if count > 1 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
    }
    Ok(out)
}
