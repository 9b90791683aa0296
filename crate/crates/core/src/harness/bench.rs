//! Occupancy benchmark: voting convolution against the dense oracle.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::BenchConfig;
use crate::sparse_conv::{dense_conv_oracle, voting_conv, BiasMode, ConvKernel3D, DenseGrid};
use crate::voxel::SparseVoxelGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub occupancy: f64,
    pub occupied: usize,
    pub votes: u64,
    /// occupied x kernel volume x c_in x c_out.
    pub expected_votes: u64,
    /// Median wall time in milliseconds.
    pub voting_ms: f64,
    pub dense_ms: f64,
}

/// Exactly `round(occupancy · size³)` (at least one) occupied cells in the
/// box `[0, size)³`, with uniform features in [-1, 1).
pub fn random_grid(
    size: usize,
    occupancy: f64,
    channels: usize,
    seed: u64,
) -> Result<SparseVoxelGrid> {
    if !(occupancy > 0.0 && occupancy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "occupancy must be in (0, 1], got {occupancy}"
        )));
    }
    let total = size * size * size;
    let count = ((total as f64 * occupancy).round() as usize).clamp(1, total.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, count).into_vec();
    idx.sort_unstable();
    let mut g = SparseVoxelGrid::unit(channels);
    for lin in idx {
        let cell = [
            (lin / (size * size)) as i32,
            ((lin / size) % size) as i32,
            (lin % size) as i32,
        ];
        let mut v: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        g.insert(cell, v)?;
    }
    Ok(g)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

pub fn bench_sparse(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.kernel.is_multiple_of(2) || cfg.repeats == 0 || cfg.sizes.contains(&0) {
        return Err(Error::Config(
            "bench needs an odd kernel, positive sizes and at least one repeat".into(),
        ));
    }
    let k = [cfg.kernel; 3];
    let kernel = ConvKernel3D::random(k, cfg.c_in, cfg.c_out, 1.0, seed)?;
    let mut rows = Vec::new();
    for (si, &size) in cfg.sizes.iter().enumerate() {
        for (oi, &occ) in cfg.occupancies.iter().enumerate() {
            let grid_seed = seed ^ ((si as u64) << 32 | oi as u64).wrapping_mul(0x9E37_79B9);
            let grid = random_grid(size, occ, cfg.c_in, grid_seed)?;
            let dense = DenseGrid::from_sparse(&grid, [0, 0, 0], [size; 3]);
            let mut votes = 0;
            let mut vt = Vec::with_capacity(cfg.repeats);
            let mut dt = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let mut out = None;
                vt.push(time_ms(|| {
                    out = Some(voting_conv(&grid, &kernel, BiasMode::Off))
                }));
                votes = out.expect("timed closure ran")?.votes;
                let mut d = None;
                dt.push(time_ms(|| d = Some(dense_conv_oracle(&dense, &kernel))));
                d.expect("timed closure ran")?;
            }
            rows.push(BenchRow {
                size,
                occupancy: occ,
                occupied: grid.len(),
                votes,
                expected_votes: (grid.len() * kernel.volume() * cfg.c_in * cfg.c_out) as u64,
                voting_ms: median(vt),
                dense_ms: median(dt),
            });
        }
    }
    Ok(rows)
}

/// Deterministic columns only.
pub fn bench_counts_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("size,occupancy,occupied,votes,expected_votes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.size, r.occupancy, r.occupied, r.votes, r.expected_votes
        ));
    }
    s
}

/// All columns including wall times.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("size,occupancy,occupied,votes,expected_votes,voting_ms,dense_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4}\n",
            r.size, r.occupancy, r.occupied, r.votes, r.expected_votes, r.voting_ms, r.dense_ms
        ));
    }
    s
}
