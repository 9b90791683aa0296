//! Dense reference convolution.

use super::ConvKernel3D;
use crate::error::{Error, Result};
use crate::voxel::{CellIndex, SparseVoxelGrid};

/// Dense box of cells starting at integer index `origin`, layout `[x][y][z][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    origin: CellIndex,
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(origin: CellIndex, dims: [usize; 3], channels: usize) -> Self {
        Self {
            origin,
            dims,
            channels,
            data: vec![0.0; dims.iter().product::<usize>() * channels],
        }
    }

    /// Materializes the sparse cells that fall inside the box; others are dropped.
    pub fn from_sparse(grid: &SparseVoxelGrid, origin: CellIndex, dims: [usize; 3]) -> Self {
        let mut d = Self::zeros(origin, dims, grid.channels());
        for (idx, v) in grid.iter() {
            if let Some(off) = d.offset(idx) {
                d.data[off..off + v.len()].copy_from_slice(v);
            }
        }
        d
    }

    pub fn origin(&self) -> CellIndex {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, idx: &CellIndex) -> Option<usize> {
        let mut lin = 0usize;
        for a in 0..3 {
            let r = idx[a] - self.origin[a];
            if r < 0 || r as usize >= self.dims[a] {
                return None;
            }
            lin = lin * self.dims[a] + r as usize;
        }
        Some(lin * self.channels)
    }

    pub fn get(&self, idx: &CellIndex) -> Option<&[f64]> {
        self.offset(idx).map(|o| &self.data[o..o + self.channels])
    }

    pub fn get_mut(&mut self, idx: &CellIndex) -> Option<&mut [f64]> {
        let c = self.channels;
        self.offset(idx).map(move |o| &mut self.data[o..o + c])
    }

    /// Every cell of the box with its vector, in `[x][y][z]` order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (CellIndex, &[f64])> {
        let [nx, ny, nz] = self.dims;
        let o = self.origin;
        (0..nx * ny * nz).map(move |lin| {
            let (x, y, z) = (lin / (ny * nz), (lin / nz) % ny, lin % nz);
            (
                [o[0] + x as i32, o[1] + y as i32, o[2] + z as i32],
                &self.data[lin * self.channels..(lin + 1) * self.channels],
            )
        })
    }

    /// Non-zero cells as a sparse grid with unit cells.
    pub fn to_sparse(&self) -> SparseVoxelGrid {
        let mut g = SparseVoxelGrid::unit(self.channels);
        for (idx, v) in self.iter_cells() {
            g.insert(idx, v.to_vec()).expect("channel count matches");
        }
        g
    }
}

/// Direct convolution `out[x] = Σ_o Σ_ci in[x - o][ci] · W[o][ci][co]`, with
/// zero outside the box and no bias. The output box equals the input box, so
/// callers pad the input by the kernel half-extent to see the full response.
pub fn dense_conv_oracle(input: &DenseGrid, kernel: &ConvKernel3D) -> Result<DenseGrid> {
    if kernel.c_in() != input.channels {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, grid has {}",
            kernel.c_in(),
            input.channels
        )));
    }
    let (c_in, c_out) = (kernel.c_in(), kernel.c_out());
    let [nx, ny, nz] = input.dims;
    let [kx, ky, kz] = kernel.size();
    let h = kernel.half();
    let mut out = DenseGrid::zeros(input.origin, input.dims, c_out);
    for x in 0..nx as i32 {
        for y in 0..ny as i32 {
            for z in 0..nz as i32 {
                let o_lin = ((x as usize * ny + y as usize) * nz + z as usize) * c_out;
                for a in 0..kx as i32 {
                    for b in 0..ky as i32 {
                        for c in 0..kz as i32 {
                            let (sx, sy, sz) = (x - (a - h[0]), y - (b - h[1]), z - (c - h[2]));
                            if sx < 0
                                || sy < 0
                                || sz < 0
                                || sx >= nx as i32
                                || sy >= ny as i32
                                || sz >= nz as i32
                            {
                                continue;
                            }
                            let i_lin =
                                ((sx as usize * ny + sy as usize) * nz + sz as usize) * c_in;
                            let t = ((a as usize) * ky + b as usize) * kz + c as usize;
                            let tap = kernel.tap(t);
                            for ci in 0..c_in {
                                let v = input.data[i_lin + ci];
                                for co in 0..c_out {
                                    out.data[o_lin + co] += v * tap[ci * c_out + co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
