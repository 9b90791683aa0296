//! Shared fixtures for the convolution benchmarks.

use voxvote::harness::bench::random_grid;
use voxvote::sparse_conv::{ConvKernel3D, DenseGrid};
use voxvote::SparseVoxelGrid;

pub const C_IN: usize = 4;
pub const C_OUT: usize = 4;

/// Random occupied grid in `[0, size)³`, its dense copy and a 3³ kernel.
pub fn fixture(
    size: usize,
    occupancy: f64,
    seed: u64,
) -> (SparseVoxelGrid, DenseGrid, ConvKernel3D) {
    let grid = random_grid(size, occupancy, C_IN, seed).expect("valid occupancy");
    let dense = DenseGrid::from_sparse(&grid, [0, 0, 0], [size; 3]);
    let kernel = ConvKernel3D::random([3; 3], C_IN, C_OUT, 1.0, seed).expect("valid kernel");
    (grid, dense, kernel)
}
