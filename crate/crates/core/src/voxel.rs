//! Sparse voxel grids: integer cell index -> feature vector.

use std::collections::BTreeMap;

use crate::cloud::{FeatureMatrix, Point3, PointCloud};
use crate::error::{Error, Result};

pub type CellIndex = [i32; 3];

/// Sparse map from cell index to a `channels`-long feature vector.
///
/// All-zero cells are never stored; absence means an exact zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    origin: Point3,
    cell_size: f64,
    channels: usize,
    cells: BTreeMap<CellIndex, Vec<f64>>,
}

impl SparseVoxelGrid {
    pub fn new(origin: Point3, cell_size: f64, channels: usize) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            channels,
            cells: BTreeMap::new(),
        })
    }

    /// Grid with unit cells at the origin, for callers that only care about indices.
    pub fn unit(channels: usize) -> Self {
        Self::new([0.0; 3], 1.0, channels).expect("unit grid parameters are valid")
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, idx: &CellIndex) -> Option<&[f64]> {
        self.cells.get(idx).map(Vec::as_slice)
    }

    /// Cells in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (&CellIndex, &[f64])> {
        self.cells.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn cells(&self) -> &BTreeMap<CellIndex, Vec<f64>> {
        &self.cells
    }

    /// Stores `value` at `idx`; an all-zero value removes the cell instead.
    pub fn insert(&mut self, idx: CellIndex, value: Vec<f64>) -> Result<()> {
        if value.len() != self.channels {
            return Err(Error::Shape(format!(
                "cell vector has {} entries, grid has {} channels",
                value.len(),
                self.channels
            )));
        }
        if value.iter().all(|&v| v == 0.0) {
            self.cells.remove(&idx);
        } else {
            self.cells.insert(idx, value);
        }
        Ok(())
    }

    /// Same grid metadata with a different channel count and no cells.
    pub fn empty_like(&self, channels: usize) -> Self {
        Self {
            origin: self.origin,
            cell_size: self.cell_size,
            channels,
            cells: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts(
        origin: Point3,
        cell_size: f64,
        channels: usize,
        cells: BTreeMap<CellIndex, Vec<f64>>,
    ) -> Self {
        debug_assert!(cells
            .values()
            .all(|v| v.len() == channels && v.iter().any(|&x| x != 0.0)));
        Self {
            origin,
            cell_size,
            channels,
            cells,
        }
    }

    /// Inclusive bounding box of the stored indices.
    pub fn bounds(&self) -> Option<(CellIndex, CellIndex)> {
        let mut it = self.cells.keys();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for k in it {
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        Some((lo, hi))
    }

    /// Center of a cell in world coordinates.
    pub fn cell_center(&self, idx: &CellIndex) -> Point3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + (idx[a] as f64 + 0.5) * self.cell_size;
        }
        c
    }
}

/// How per-point contributions are reduced within a cell.
#[derive(Debug, Clone, Copy)]
pub enum Reducer<'a> {
    /// One channel holding the number of points in the cell.
    Count,
    /// Mean of the attached per-point rows (aligned with the cloud's entries).
    MeanFeature(&'a FeatureMatrix),
}

/// Cell index of `p` on a grid anchored at `origin`.
pub fn cell_of(p: Point3, origin: Point3, cell_size: f64) -> CellIndex {
    let mut idx = [0; 3];
    for a in 0..3 {
        idx[a] = ((p[a] - origin[a]) / cell_size).floor() as i32;
    }
    idx
}

/// Bins the valid points of `cloud` into cells of edge `cell_size`.
///
/// The origin is the component-wise minimum of the valid points, so all
/// indices are non-negative.
pub fn voxelize(
    cloud: &PointCloud,
    cell_size: f64,
    reducer: Reducer<'_>,
) -> Result<SparseVoxelGrid> {
    if !(cell_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    let origin = cloud.bounds().map_or([0.0; 3], |(lo, _)| lo);
    let channels = match reducer {
        Reducer::Count => 1,
        Reducer::MeanFeature(f) => {
            if f.n_rows() != cloud.len() {
                return Err(Error::Shape(format!(
                    "{} feature rows for {} points",
                    f.n_rows(),
                    cloud.len()
                )));
            }
            f.n_cols().max(1)
        }
    };
    let mut acc: BTreeMap<CellIndex, (Vec<f64>, usize)> = BTreeMap::new();
    for i in cloud.valid_indices() {
        let idx = cell_of(cloud.point(i), origin, cell_size);
        let entry = acc.entry(idx).or_insert_with(|| (vec![0.0; channels], 0));
        entry.1 += 1;
        match reducer {
            Reducer::Count => entry.0[0] += 1.0,
            Reducer::MeanFeature(f) => {
                for (a, &v) in entry.0.iter_mut().zip(f.row(i)) {
                    *a += v;
                }
            }
        }
    }
    let mut grid = SparseVoxelGrid::new(origin, cell_size, channels)?;
    for (idx, (mut v, n)) in acc {
        if let Reducer::MeanFeature(_) = reducer {
            v.iter_mut().for_each(|x| *x /= n as f64);
        }
        grid.insert(idx, v)?;
    }
    Ok(grid)
}

/// Centroid of the valid points in each occupied cell, in ascending cell order.
///
/// Also returns, for every cloud entry, the position of its cell's centroid in
/// the output (`usize::MAX` for invalid entries).
pub fn voxel_centroids(cloud: &PointCloud, leaf: f64) -> Result<(Vec<Point3>, Vec<usize>)> {
    if !(leaf > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "leaf size must be positive, got {leaf}"
        )));
    }
    let origin = cloud.bounds().map_or([0.0; 3], |(lo, _)| lo);
    let mut acc: BTreeMap<CellIndex, (Point3, usize)> = BTreeMap::new();
    for i in cloud.valid_indices() {
        let e = acc
            .entry(cell_of(cloud.point(i), origin, leaf))
            .or_insert(([0.0; 3], 0));
        e.0 = crate::cloud::add(e.0, cloud.point(i));
        e.1 += 1;
    }
    let slot: BTreeMap<CellIndex, usize> = acc.keys().enumerate().map(|(s, k)| (*k, s)).collect();
    let centroids = acc
        .values()
        .map(|(sum, n)| crate::cloud::scale(*sum, 1.0 / *n as f64))
        .collect();
    let assign = (0..cloud.len())
        .map(|i| {
            if cloud.is_valid(i) {
                slot[&cell_of(cloud.point(i), origin, leaf)]
            } else {
                usize::MAX
            }
        })
        .collect();
    Ok((centroids, assign))
}
