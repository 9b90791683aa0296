//! Stacked voting convolutions with ReLU, L1 activation penalty and backprop.

use std::collections::BTreeMap;

use super::{relu_sparse, voting_conv, BiasMode, ConvKernel3D};
use crate::error::{Error, Result};
use crate::voxel::{CellIndex, SparseVoxelGrid};

/// Per-layer occupancy counts recorded during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOccupancy {
    pub occupancy_in: usize,
    /// Cells that received at least one vote.
    pub support: usize,
    pub occupancy_out: usize,
    /// Strictly positive activation entries.
    pub active_entries: usize,
    pub channels: usize,
    pub votes: u64,
}

impl LayerOccupancy {
    /// Fraction of activation entries on the vote support that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.support * self.channels;
        if total == 0 {
            1.0
        } else {
            1.0 - self.active_entries as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub output: SparseVoxelGrid,
    /// `lambda · Σ_layers l1_value`.
    pub penalty: f64,
    pub occupancy: Vec<LayerOccupancy>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: SparseVoxelGrid,
    pre: SparseVoxelGrid,
}

#[derive(Debug, Clone)]
struct Trace {
    layers: Vec<LayerTrace>,
    lambda: f64,
}

/// Gradient of the loss with respect to one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Alternating voting convolution (bias on support) and ReLU layers.
#[derive(Debug, Clone)]
pub struct SparseNet {
    layers: Vec<ConvKernel3D>,
    trace: Option<Trace>,
}

impl SparseNet {
    pub fn new(layers: Vec<ConvKernel3D>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].c_out() != w[1].c_in() {
                return Err(Error::Shape(format!(
                    "layer outputs {} channels but next layer expects {}",
                    w[0].c_out(),
                    w[1].c_in()
                )));
            }
        }
        Ok(Self {
            layers,
            trace: None,
        })
    }

    pub fn layers(&self) -> &[ConvKernel3D] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvKernel3D] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<ConvKernel3D> {
        self.layers
    }

    fn run(
        &self,
        input: &SparseVoxelGrid,
        lambda: f64,
        keep: bool,
    ) -> Result<(NetOutput, Option<Trace>)> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "L1 weight must be non-negative, got {lambda}"
            )));
        }
        let mut x = input.clone();
        let mut l1_total = 0.0;
        let mut occupancy = Vec::with_capacity(self.layers.len());
        let mut trace = Vec::new();
        for kernel in &self.layers {
            let conv = voting_conv(&x, kernel, BiasMode::OnSupport)?;
            let act = relu_sparse(&conv.grid);
            l1_total += act.l1_value;
            occupancy.push(LayerOccupancy {
                occupancy_in: x.len(),
                support: conv.support,
                occupancy_out: act.occupancy_out,
                active_entries: act
                    .grid
                    .iter()
                    .map(|(_, v)| v.iter().filter(|&&a| a > 0.0).count())
                    .sum(),
                channels: kernel.c_out(),
                votes: conv.votes,
            });
            if keep {
                trace.push(LayerTrace {
                    input: x,
                    pre: conv.grid,
                });
            }
            x = act.grid;
        }
        let out = NetOutput {
            output: x,
            penalty: lambda * l1_total,
            occupancy,
        };
        Ok((
            out,
            keep.then_some(Trace {
                layers: trace,
                lambda,
            }),
        ))
    }

    /// Forward pass without retaining a trace.
    pub fn evaluate(&self, input: &SparseVoxelGrid, lambda: f64) -> Result<NetOutput> {
        Ok(self.run(input, lambda, false)?.0)
    }

    /// Forward pass that keeps the trace needed by [`SparseNet::backward`].
    pub fn forward(&mut self, input: &SparseVoxelGrid, lambda: f64) -> Result<NetOutput> {
        let (out, trace) = self.run(input, lambda, true)?;
        self.trace = trace;
        Ok(out)
    }

    /// Smallest |pre-activation| in the retained trace, `None` before a
    /// forward pass. Finite-difference checks need it well above the step.
    pub fn kink_margin(&self) -> Option<f64> {
        let t = self.trace.as_ref()?;
        Some(
            t.layers
                .iter()
                .flat_map(|l| l.pre.iter().flat_map(|(_, v)| v.iter().copied()))
                .map(f64::abs)
                .fold(f64::INFINITY, f64::min),
        )
    }

    /// Gradients of `task_loss + lambda · Σ|activations|` for every kernel.
    ///
    /// `upstream` holds dL_task/d(output) for output cells; cells missing from
    /// it have zero task gradient. The L1 subgradient at zero is zero.
    pub fn backward(&self, upstream: &BTreeMap<CellIndex, Vec<f64>>) -> Result<Vec<KernelGrad>> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let lambda = trace.lambda;
        let mut grads: Vec<KernelGrad> = self
            .layers
            .iter()
            .map(|k| KernelGrad {
                weights: vec![0.0; k.weights().len()],
                bias: vec![0.0; k.c_out()],
            })
            .collect();

        // dL/d(activation) of the current layer, keyed by cell.
        let mut g_act: BTreeMap<CellIndex, Vec<f64>> = upstream.clone();
        for (l, kernel) in self.layers.iter().enumerate().rev() {
            let LayerTrace { input, pre } = &trace.layers[l];
            let c_in = kernel.c_in();
            let c_out = kernel.c_out();

            let mut g_pre: BTreeMap<CellIndex, Vec<f64>> = BTreeMap::new();
            for (cell, z) in pre.iter() {
                let up = g_act.get(cell);
                let g: Vec<f64> = (0..c_out)
                    .map(|c| {
                        if z[c] > 0.0 {
                            up.map_or(0.0, |u| u[c]) + lambda
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if g.iter().any(|&v| v != 0.0) {
                    for (b, v) in grads[l].bias.iter_mut().zip(&g) {
                        *b += v;
                    }
                    g_pre.insert(*cell, g);
                }
            }

            let offsets: Vec<(usize, [i32; 3])> = kernel.offsets().collect();
            let mut g_in: BTreeMap<CellIndex, Vec<f64>> = BTreeMap::new();
            for (u, f) in input.iter() {
                let mut gi = vec![0.0; c_in];
                for &(t, o) in &offsets {
                    let target = [u[0] + o[0], u[1] + o[1], u[2] + o[2]];
                    let Some(gp) = g_pre.get(&target) else {
                        continue;
                    };
                    let tap = kernel.tap(t);
                    let gw = &mut grads[l].weights[t * c_in * c_out..(t + 1) * c_in * c_out];
                    for ci in 0..c_in {
                        let row = ci * c_out;
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            gw[row + co] += f[ci] * gp[co];
                            acc += tap[row + co] * gp[co];
                        }
                        gi[ci] += acc;
                    }
                }
                g_in.insert(*u, gi);
            }
            g_act = g_in;
        }
        Ok(grads)
    }
}
