//! Sparse 3D convolution by feature-centric voting.
//!
//! Instead of sliding a kernel over every cell of a dense grid, each occupied
//! input cell casts votes into the cells its kernel footprint covers: for input
//! cell `u` with feature `f` and kernel offset `o`, the product `f · W[o]` is
//! added to output cell `u + o`. The work done is proportional to the number of
//! occupied cells, and the result is exactly the dense convolution
//! `out[x] = Σ_o in[x - o] · W[o]` restricted to cells that received a vote.
//!
//! Votes are accumulated in fixed-size chunks of input cells and the chunk
//! partials are merged in chunk order, so the floating-point result does not
//! depend on the number of worker threads.

mod dense;
mod net;

pub use dense::{dense_conv_oracle, DenseGrid};
pub use net::{KernelGrad, LayerOccupancy, NetOutput, SparseNet};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::voxel::{CellIndex, SparseVoxelGrid};

/// Input cells handled by one voting task. Fixed so that the merge order, and
/// therefore the floating-point sums, never depend on the thread count.
const VOTE_CHUNK: usize = 256;

/// A 3D convolution kernel with odd spatial extents.
///
/// Weights are stored offset-major: `[kx][ky][kz][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel3D {
    size: [usize; 3],
    c_in: usize,
    c_out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel3D {
    pub fn new(
        size: [usize; 3],
        c_in: usize,
        c_out: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if size.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Shape(format!(
                "kernel extents must be odd, got {size:?}"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Shape("kernel channels must be positive".into()));
        }
        let n = size.iter().product::<usize>() * c_in * c_out;
        if weights.len() != n || bias.len() != c_out {
            return Err(Error::Shape(format!(
                "kernel {size:?} {c_in}->{c_out} needs {n} weights and {c_out} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "kernel parameters must be finite".into(),
            ));
        }
        Ok(Self {
            size,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    pub fn zeros(size: [usize; 3], c_in: usize, c_out: usize) -> Result<Self> {
        let n = size.iter().product::<usize>() * c_in * c_out;
        Self::new(size, c_in, c_out, vec![0.0; n], vec![0.0; c_out])
    }

    /// 1x1x1 identity map on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self::new([1, 1, 1], channels, channels, w, vec![0.0; channels])
            .expect("identity kernel is well formed")
    }

    /// Gaussian weights with variance `gain / (volume · c_in)`, zero bias.
    pub fn random(
        size: [usize; 3],
        c_in: usize,
        c_out: usize,
        gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (size.iter().product::<usize>() * c_in) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size.iter().product::<usize>() * c_in * c_out;
        let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::new(size, c_in, c_out, w, vec![0.0; c_out])
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn half(&self) -> [i32; 3] {
        [
            (self.size[0] / 2) as i32,
            (self.size[1] / 2) as i32,
            (self.size[2] / 2) as i32,
        ]
    }

    /// Kernel offsets in storage order, paired with their flat offset index.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, [i32; 3])> + '_ {
        let h = self.half();
        let [kx, ky, kz] = self.size;
        (0..kx * ky * kz).map(move |t| {
            let (a, b, c) = (t / (ky * kz), (t / kz) % ky, t % kz);
            (t, [a as i32 - h[0], b as i32 - h[1], c as i32 - h[2]])
        })
    }

    /// The `c_in x c_out` weight block of one offset.
    #[inline]
    pub fn tap(&self, t: usize) -> &[f64] {
        let n = self.c_in * self.c_out;
        &self.weights[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    Off,
    /// Bias is added only to cells that received at least one vote.
    OnSupport,
}

/// Output of one voting convolution.
#[derive(Debug, Clone)]
pub struct VotingOutput {
    /// Accumulated (and biased) cells; exact-zero vectors are dropped.
    pub grid: SparseVoxelGrid,
    /// Number of cells that received at least one vote.
    pub support: usize,
    /// Multiply-accumulate count: occupied cells x kernel volume x c_in x c_out.
    pub votes: u64,
}

#[inline]
fn shift(u: &CellIndex, o: [i32; 3]) -> CellIndex {
    [u[0] + o[0], u[1] + o[1], u[2] + o[2]]
}

struct Partial {
    keys: Vec<CellIndex>,
    acc: Vec<f64>,
}

fn vote_chunk(cells: &[(&CellIndex, &[f64])], kernel: &ConvKernel3D) -> Partial {
    let c_out = kernel.c_out;
    let mut slots: FxHashMap<CellIndex, usize> = FxHashMap::default();
    let mut keys = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    let offsets: Vec<(usize, [i32; 3])> = kernel.offsets().collect();
    for (u, f) in cells {
        for &(t, o) in &offsets {
            let target = shift(u, o);
            let slot = *slots.entry(target).or_insert_with(|| {
                keys.push(target);
                acc.resize(acc.len() + c_out, 0.0);
                keys.len() - 1
            });
            let out = &mut acc[slot * c_out..(slot + 1) * c_out];
            let tap = kernel.tap(t);
            for (ci, &x) in f.iter().enumerate() {
                let w = &tap[ci * c_out..(ci + 1) * c_out];
                for (o, &wv) in out.iter_mut().zip(w) {
                    *o += x * wv;
                }
            }
        }
    }
    Partial { keys, acc }
}

/// Sparse convolution by voting; see the module docs.
pub fn voting_conv(
    input: &SparseVoxelGrid,
    kernel: &ConvKernel3D,
    bias_mode: BiasMode,
) -> Result<VotingOutput> {
    if kernel.c_in != input.channels() {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, grid has {}",
            kernel.c_in,
            input.channels()
        )));
    }
    let c_out = kernel.c_out;
    let cells: Vec<(&CellIndex, &[f64])> = input.iter().collect();
    let partials: Vec<Partial> = cells
        .par_chunks(VOTE_CHUNK)
        .map(|chunk| vote_chunk(chunk, kernel))
        .collect();

    let mut slots: FxHashMap<CellIndex, usize> = FxHashMap::default();
    let mut keys: Vec<CellIndex> = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    for p in partials {
        for (k, key) in p.keys.iter().enumerate() {
            let slot = *slots.entry(*key).or_insert_with(|| {
                keys.push(*key);
                acc.resize(acc.len() + c_out, 0.0);
                keys.len() - 1
            });
            for (a, v) in acc[slot * c_out..(slot + 1) * c_out]
                .iter_mut()
                .zip(&p.acc[k * c_out..(k + 1) * c_out])
            {
                *a += v;
            }
        }
    }

    let support = keys.len();
    let mut out = BTreeMap::new();
    for (slot, key) in keys.into_iter().enumerate() {
        let mut v = acc[slot * c_out..(slot + 1) * c_out].to_vec();
        if bias_mode == BiasMode::OnSupport {
            for (x, b) in v.iter_mut().zip(&kernel.bias) {
                *x += b;
            }
        }
        if v.iter().any(|&x| x != 0.0) {
            out.insert(key, v);
        }
    }
    let votes = (input.len() * kernel.volume() * kernel.c_in * c_out) as u64;
    Ok(VotingOutput {
        grid: SparseVoxelGrid::from_parts(input.origin(), input.cell_size(), c_out, out),
        support,
        votes,
    })
}

/// Post-activation grid plus its L1 mass and occupancy counts.
#[derive(Debug, Clone)]
pub struct SparseLayerOutput {
    pub grid: SparseVoxelGrid,
    pub l1_value: f64,
    pub occupancy_in: usize,
    pub occupancy_out: usize,
}

/// Elementwise `max(0, x)`; cells that become all-zero are removed.
pub fn relu_sparse(grid: &SparseVoxelGrid) -> SparseLayerOutput {
    let mut cells = BTreeMap::new();
    let mut l1 = 0.0;
    for (k, v) in grid.iter() {
        let r: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
        if r.iter().any(|&x| x > 0.0) {
            l1 += r.iter().sum::<f64>();
            cells.insert(*k, r);
        }
    }
    let occupancy_out = cells.len();
    SparseLayerOutput {
        grid: SparseVoxelGrid::from_parts(grid.origin(), grid.cell_size(), grid.channels(), cells),
        l1_value: l1,
        occupancy_in: grid.len(),
        occupancy_out,
    }
}

/// `lambda · Σ l1_value` over the given layer outputs.
pub fn l1_penalty(outputs: &[SparseLayerOutput], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "L1 weight must be non-negative, got {lambda}"
        )));
    }
    Ok(lambda * outputs.iter().map(|o| o.l1_value).sum::<f64>())
}
