//! Point clouds and per-point feature tables.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

#[inline]
pub fn is_finite(p: Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// An ordered set of 3D points in meters, optionally stored on a sensor grid.
///
/// Organized clouds keep one entry per grid cell (row-major) plus a validity
/// mask; invalid entries are placeholders for missing measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    grid_shape: Option<(usize, usize)>,
    valid: Option<Vec<bool>>,
}

impl PointCloud {
    /// Unorganized cloud. Entries with non-finite coordinates count as invalid.
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            grid_shape: None,
            valid: None,
        }
    }

    pub fn organized(
        points: Vec<Point3>,
        rows: usize,
        cols: usize,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if points.len() != rows * cols || valid.len() != points.len() {
            return Err(Error::Shape(format!(
                "organized cloud {rows}x{cols} needs {} points and mask entries, got {} and {}",
                rows * cols,
                points.len(),
                valid.len()
            )));
        }
        // A valid entry must carry finite coordinates.
        let valid = valid
            .into_iter()
            .zip(&points)
            .map(|(v, p)| v && is_finite(*p))
            .collect();
        Ok(Self {
            points,
            grid_shape: Some((rows, cols)),
            valid: Some(valid),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid_shape
    }

    pub fn valid_mask(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[i]) && is_finite(self.points[i])
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_valid(i)).collect()
    }

    pub fn num_valid(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_valid(i)).count()
    }

    /// Unorganized cloud holding the given entries, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Option<Point3> {
        let idx = self.valid_indices();
        if idx.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for &i in &idx {
            c = add(c, self.points[i]);
        }
        Some(scale(c, 1.0 / idx.len() as f64))
    }

    /// Axis-aligned bounds of the valid points.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let mut it = self.valid_indices().into_iter();
        let first = self.points[it.next()?];
        let (mut lo, mut hi) = (first, first);
        for i in it {
            let p = self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}

/// N x d row-major table of finite reals aligned with a point list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn from_vec(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::Shape(format!(
                "{n_rows}x{n_cols} matrix needs {} values, got {}",
                n_rows * n_cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature matrix entries must be finite".into(),
            ));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), n_cols, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n_cols + j] = v;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices go through a range.
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// New matrix made of the selected rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_rows: indices.len(),
            n_cols: self.n_cols,
            data,
        }
    }

    pub fn transpose(&self) -> FeatureMatrix {
        let mut out = FeatureMatrix::zeros(self.n_cols, self.n_rows);
        for i in 0..self.n_rows {
            for j in 0..self.n_cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Dense product `self * rhs`.
    pub fn matmul(&self, rhs: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.n_cols != rhs.n_rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let mut out = FeatureMatrix::zeros(self.n_rows, rhs.n_cols);
        for i in 0..self.n_rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn organized_cloud_masks_non_finite_entries() {
        let pts = vec![[0.0; 3], [f64::NAN, 0.0, 0.0], [1.0; 3], [2.0; 3]];
        let c = PointCloud::organized(pts, 2, 2, vec![true, true, false, true]).unwrap();
        assert_eq!(c.valid_indices(), vec![0, 3]);
    }

    #[test]
    fn organized_cloud_rejects_wrong_size() {
        let err = PointCloud::organized(vec![[0.0; 3]; 3], 2, 2, vec![true; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn feature_matrix_rejects_nan() {
        assert!(FeatureMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }
}
