//! Proxy training tasks for the sparse and graph networks.
//!
//! Full-batch gradient descent with a fixed step and a fixed iteration count.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{FeatureMatrix, PointCloud};
use crate::error::{Error, Result};
use crate::graph_net::{
    build_graph, normalize_adjacency, Activation, DenseLayer, GraphNet, Head, MlpParams,
};
use crate::harness::config::GraphConfig;
use crate::harness::synth::{generate_synthetic, AnomalyKind, AnomalySpec, SyntheticSpec};
use crate::io::ParamTensor;
use crate::sparse_conv::{ConvKernel3D, SparseNet};
use crate::voxel::{CellIndex, SparseVoxelGrid};

/// Loss above which training counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    /// Occupancy denoising on a voxelized sphere shell with clutter cells.
    Sparse,
    /// Per-point anomaly regression on a synthetic bump.
    Graph,
}

impl TrainTask {
    pub fn name(self) -> &'static str {
        match self {
            TrainTask::Sparse => "sparse",
            TrainTask::Graph => "graph",
        }
    }
}

impl FromStr for TrainTask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sparse" => Ok(TrainTask::Sparse),
            "graph" => Ok(TrainTask::Graph),
            _ => Err(format!("expected sparse or graph, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub iters: usize,
    pub learning_rate: f64,
    /// L1 weights; the sparse task trains once per entry.
    pub lambdas: Vec<f64>,
    /// Graph task only: no graph layers and a single linear scoring layer.
    pub linear: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TrainTask::Sparse,
            iters: 150,
            learning_rate: 1e-4,
            lambdas: vec![0.0, 0.01, 0.1],
            linear: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config(
                "train.lambdas must be non-empty and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Task loss plus L1 penalty.
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    /// Zero-activation fraction of each intermediate layer (sparse task only).
    pub zero_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub lambda: f64,
    /// One entry per iteration, measured before its update, plus a final
    /// entry for the trained parameters.
    pub epochs: Vec<EpochStats>,
    pub params: Vec<ParamTensor>,
}

impl TrainRun {
    pub fn final_stats(&self) -> &EpochStats {
        self.epochs.last().expect("at least the final entry")
    }

    /// Mean zero fraction over intermediate layers after training.
    pub fn final_zero_fraction(&self) -> f64 {
        let z = &self.final_stats().zero_fractions;
        if z.is_empty() {
            0.0
        } else {
            z.iter().sum::<f64>() / z.len() as f64
        }
    }
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::TrainingDiverged { iteration, loss });
    }
    Ok(())
}

/// Input and target grids of the denoising task.
pub fn sparse_task(seed: u64) -> Result<(SparseVoxelGrid, BTreeMap<CellIndex, f64>)> {
    const SIDE: i32 = 16;
    const RADIUS: f64 = 5.0;
    const CLUTTER: f64 = 0.03;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (SIDE as f64 - 1.0) / 2.0;
    let mut input = SparseVoxelGrid::unit(1);
    let mut target = BTreeMap::new();
    for x in 0..SIDE {
        for y in 0..SIDE {
            for z in 0..SIDE {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2))
                    .sqrt();
                let surface = (r - RADIUS).abs() < 0.5;
                if surface {
                    target.insert([x, y, z], 1.0);
                }
                if surface || rng.gen::<f64>() < CLUTTER {
                    input.insert([x, y, z], vec![1.0])?;
                }
            }
        }
    }
    Ok((input, target))
}

/// 1 -> 8 -> 8 -> 1 channels with 3x3x3 kernels and small positive biases.
pub fn sparse_init(seed: u64) -> Result<SparseNet> {
    let dims = [(1, 8), (8, 8), (8, 1)];
    let layers = dims
        .iter()
        .enumerate()
        .map(|(l, &(ci, co))| {
            let k = ConvKernel3D::random([3; 3], ci, co, 2.0, seed.wrapping_add(l as u64))?;
            ConvKernel3D::new([3; 3], ci, co, k.weights().to_vec(), vec![0.01; co])
        })
        .collect::<Result<Vec<_>>>()?;
    SparseNet::new(layers)
}

fn sparse_params(net: &SparseNet) -> Vec<ParamTensor> {
    net.layers()
        .iter()
        .map(|k| {
            let s = k.size();
            ParamTensor {
                dims: vec![s[0], s[1], s[2], k.c_in(), k.c_out()],
                weights: k.weights().to_vec(),
                bias: k.bias().to_vec(),
            }
        })
        .collect()
}

fn sparse_step(
    net: &mut SparseNet,
    input: &SparseVoxelGrid,
    target: &BTreeMap<CellIndex, f64>,
    lambda: f64,
) -> Result<(EpochStats, BTreeMap<CellIndex, Vec<f64>>)> {
    let out = net.forward(input, lambda)?;
    let mut task = 0.0;
    let mut upstream = BTreeMap::new();
    for (cell, v) in out.output.iter() {
        let t = target.get(cell).copied().unwrap_or(0.0);
        task += 0.5 * (v[0] - t).powi(2);
        upstream.insert(*cell, vec![v[0] - t]);
    }
    for (cell, t) in target {
        if out.output.get(cell).is_none() {
            task += 0.5 * t * t;
        }
    }
    let n = out.occupancy.len();
    let zero_fractions = out.occupancy[..n.saturating_sub(1)]
        .iter()
        .map(|o| o.zero_fraction())
        .collect();
    Ok((
        EpochStats {
            epoch: 0,
            loss: task + out.penalty,
            task_loss: task,
            penalty: out.penalty,
            zero_fractions,
        },
        upstream,
    ))
}

/// Trains the sparse net once per configured lambda from the same init.
pub fn train_sparse(cfg: &TrainConfig) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    let (input, target) = sparse_task(cfg.seed)?;
    let mut runs = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let mut net = sparse_init(cfg.seed)?;
        let mut epochs = Vec::with_capacity(cfg.iters + 1);
        for it in 0..=cfg.iters {
            let (mut stats, upstream) = sparse_step(&mut net, &input, &target, lambda)?;
            stats.epoch = it;
            check_loss(it, stats.loss)?;
            epochs.push(stats);
            if it == cfg.iters {
                break;
            }
            let grads = net.backward(&upstream)?;
            for (k, g) in net.layers_mut().iter_mut().zip(&grads) {
                for (w, d) in k.weights_mut().iter_mut().zip(&g.weights) {
                    *w -= cfg.learning_rate * d;
                }
                for (b, d) in k.bias_mut().iter_mut().zip(&g.bias) {
                    *b -= cfg.learning_rate * d;
                }
            }
        }
        runs.push(TrainRun {
            lambda,
            epochs,
            params: sparse_params(&net),
        });
    }
    Ok(runs)
}

/// Foreground points of a synthetic sphere with a bump, centered and scaled
/// coordinates as features, and bump labels as targets.
pub fn graph_task(seed: u64) -> Result<(PointCloud, FeatureMatrix, Vec<f64>)> {
    let spec = SyntheticSpec {
        n_points: 32 * 32,
        noise_sigma: 0.0005,
        anomaly: Some(AnomalySpec {
            kind: AnomalyKind::Bump,
            radius: 0.04,
            depth: 0.01,
        }),
        seed,
        ..SyntheticSpec::default()
    };
    let (cloud, mask) = generate_synthetic(&spec)?;
    let keep: Vec<usize> = cloud
        .valid_indices()
        .into_iter()
        .filter(|&i| cloud.point(i)[2] > 0.005)
        .collect();
    let fg = cloud.select(&keep);
    let s = spec.object_size;
    let rows: Vec<Vec<f64>> = fg
        .points()
        .iter()
        .map(|p| p.iter().map(|v| v / s).collect())
        .collect();
    let target = keep
        .iter()
        .map(|&i| f64::from(u8::from(mask.labels()[i])))
        .collect();
    Ok((fg, FeatureMatrix::from_rows(&rows)?, target))
}

fn graph_params(net: &GraphNet) -> Vec<ParamTensor> {
    let mut out: Vec<ParamTensor> = net
        .layers
        .iter()
        .map(|l| ParamTensor {
            dims: vec![l.weight.n_rows(), l.weight.n_cols()],
            weights: l.weight.data().to_vec(),
            bias: l.bias.clone().unwrap_or_default(),
        })
        .collect();
    out.extend(net.mlp.layers().iter().map(|l| ParamTensor {
        dims: vec![l.weight.n_rows(), l.weight.n_cols()],
        weights: l.weight.data().to_vec(),
        bias: l.bias.clone(),
    }));
    out
}

pub fn graph_init(d: usize, graph: &GraphConfig, linear: bool, seed: u64) -> Result<GraphNet> {
    if linear {
        let mlp = MlpParams::random(&[d, 1], seed)?;
        let l = &mlp.layers()[0];
        let layer = DenseLayer {
            weight: l.weight.clone(),
            bias: vec![0.0],
        };
        GraphNet::new(
            vec![],
            MlpParams::new(vec![layer])?,
            Activation::Relu,
            Head::PerNode,
        )
    } else {
        GraphNet::random(d, graph.hidden, graph.layers, Head::PerNode, seed)
    }
}

/// Per-point regression with mean squared error.
pub fn train_graph(cfg: &TrainConfig, graph: &GraphConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (fg, x, target) = graph_task(cfg.seed)?;
    let adj = normalize_adjacency(&build_graph(&fg, graph.k, graph.self_loops)?)?;
    let mut net = graph_init(x.n_cols(), graph, cfg.linear, cfg.seed)?;
    let n = target.len() as f64;
    let mut epochs = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let out = net.forward(&x, &adj)?;
        let loss = out
            .iter()
            .zip(&target)
            .map(|(o, t)| 0.5 * (o - t).powi(2))
            .sum::<f64>()
            / n;
        check_loss(it, loss)?;
        epochs.push(EpochStats {
            epoch: it,
            loss,
            task_loss: loss,
            penalty: 0.0,
            zero_fractions: Vec::new(),
        });
        if it == cfg.iters {
            break;
        }
        let g: Vec<f64> = out.iter().zip(&target).map(|(o, t)| (o - t) / n).collect();
        let grads = net.backward(&g)?;
        net.for_each_param_mut(&grads, |w, d| *w -= cfg.learning_rate * d);
    }
    Ok(TrainRun {
        lambda: 0.0,
        epochs,
        params: graph_params(&net),
    })
}

/// Runs the configured task.
pub fn train_proxy(cfg: &TrainConfig, graph: &GraphConfig) -> Result<Vec<TrainRun>> {
    match cfg.task {
        TrainTask::Sparse => train_sparse(cfg),
        TrainTask::Graph => Ok(vec![train_graph(cfg, graph)?]),
    }
}

/// CSV of the loss trace: one row per (lambda, epoch).
pub fn trace_csv(runs: &[TrainRun]) -> String {
    let width = runs
        .iter()
        .flat_map(|r| r.epochs.iter().map(|e| e.zero_fractions.len()))
        .max()
        .unwrap_or(0);
    let mut s = String::from("lambda,epoch,loss,task_loss,penalty");
    for l in 0..width {
        s.push_str(&format!(",zero_fraction_{l}"));
    }
    s.push('\n');
    for r in runs {
        for e in &r.epochs {
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e}",
                r.lambda, e.epoch, e.loss, e.task_loss, e.penalty
            ));
            for z in &e.zero_fractions {
                s.push_str(&format!(",{z:.6}"));
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_keep_the_seeded_init() {
        let cfg = TrainConfig {
            iters: 0,
            lambdas: vec![0.0],
            ..TrainConfig::default()
        };
        let runs = train_sparse(&cfg).unwrap();
        assert_eq!(
            runs[0].params,
            sparse_params(&sparse_init(cfg.seed).unwrap())
        );
        assert_eq!(runs[0].epochs.len(), 1);

        let g = GraphConfig::default();
        let run = train_graph(
            &TrainConfig {
                task: TrainTask::Graph,
                ..cfg
            },
            &g,
        )
        .unwrap();
        let (_, x, _) = graph_task(0).unwrap();
        assert_eq!(
            run.params,
            graph_params(&graph_init(x.n_cols(), &g, false, 0).unwrap())
        );
    }

    #[test]
    fn convex_linear_case_has_monotone_loss() {
        let cfg = TrainConfig {
            task: TrainTask::Graph,
            iters: 100,
            learning_rate: 0.05,
            linear: true,
            ..TrainConfig::default()
        };
        let run = train_graph(&cfg, &GraphConfig::default()).unwrap();
        for w in run.epochs.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-15,
                "{} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
        assert!(run.final_stats().loss < run.epochs[0].loss);
    }

    #[test]
    fn huge_step_diverges() {
        let cfg = TrainConfig {
            task: TrainTask::Graph,
            iters: 200,
            learning_rate: 1e3,
            linear: true,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_graph(&cfg, &GraphConfig::default()),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn sparse_training_reduces_loss() {
        let cfg = TrainConfig {
            iters: 30,
            lambdas: vec![0.0],
            ..TrainConfig::default()
        };
        let run = &train_sparse(&cfg).unwrap()[0];
        assert!(run.final_stats().loss < run.epochs[0].loss);
        assert_eq!(run.final_stats().zero_fractions.len(), 2);
    }
}
