//! k-NN graph convolution, readout and MLP scoring head with exact gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cloud::{FeatureMatrix, PointCloud};
use crate::error::{Error, Result};
use crate::neighbors::knn_search;

/// Symmetrized 0/1 adjacency stored as sorted neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    neighbors: Vec<Vec<usize>>,
    self_loops: bool,
}

impl KnnGraph {
    /// Builds a graph from directed edge lists; edges are symmetrized.
    pub fn from_directed(directed: &[Vec<usize>], self_loops: bool) -> Result<Self> {
        let n = directed.len();
        let mut neighbors = vec![Vec::new(); n];
        for (i, list) in directed.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::InvalidArgument(format!(
                        "edge {i}->{j} out of range for {n} nodes"
                    )));
                }
                if i != j {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            if self_loops {
                list.push(i);
            }
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            neighbors,
            self_loops,
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// D_ii = Σ_j A_ij.
    pub fn degree(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Row-major dense 0/1 matrix, for tests and small inspections.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut a = vec![0.0; n * n];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                a[i * n + j] = 1.0;
            }
        }
        a
    }
}

/// k-NN graph over every point of the cloud; all entries must be valid.
pub fn build_graph(cloud: &PointCloud, k: usize, self_loops: bool) -> Result<KnnGraph> {
    if cloud.num_valid() != cloud.len() {
        return Err(Error::InvalidArgument(
            "graph construction needs a cloud without invalid entries".into(),
        ));
    }
    let directed = knn_search(cloud, k)?;
    KnnGraph::from_directed(&directed, self_loops)
}

/// Sparse `D^{-1/2} A D^{-1/2}` in CSR layout. Symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

pub fn normalize_adjacency(graph: &KnnGraph) -> Result<NormAdjacency> {
    let deg = graph.degree();
    if deg.is_empty() {
        return Err(Error::DegenerateGraph("graph has no nodes".into()));
    }
    if let Some(i) = deg.iter().position(|&d| d == 0) {
        return Err(Error::DegenerateGraph(format!("node {i} is isolated")));
    }
    let inv: Vec<f64> = deg.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut row_ptr = Vec::with_capacity(graph.n() + 1);
    let mut cols = Vec::with_capacity(graph.num_edges());
    let mut vals = Vec::with_capacity(graph.num_edges());
    row_ptr.push(0);
    for i in 0..graph.n() {
        for &j in graph.neighbors(i) {
            cols.push(j);
            vals.push(inv[i] * inv[j]);
        }
        row_ptr.push(cols.len());
    }
    Ok(NormAdjacency {
        row_ptr,
        cols,
        vals,
    })
}

impl NormAdjacency {
    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Nonzeros of row `i` as (column, value).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for (j, v) in self.row(i) {
                a[i * n + j] = v;
            }
        }
        a
    }

    /// `Â · H`, rows computed in parallel, each accumulated in column order.
    pub fn apply(&self, h: &FeatureMatrix) -> Result<FeatureMatrix> {
        if h.n_rows() != self.n() {
            return Err(Error::Shape(format!(
                "adjacency has {} nodes, features have {} rows",
                self.n(),
                h.n_rows()
            )));
        }
        let d = h.n_cols();
        let mut out = FeatureMatrix::zeros(self.n(), d);
        if d == 0 {
            return Ok(out);
        }
        out.data_mut()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, o)| {
                for (j, a) in self.row(i) {
                    for (x, &y) in o.iter_mut().zip(h.row(j)) {
                        *x += a * y;
                    }
                }
            });
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    #[default]
    Mean,
    Max,
}

/// Weight `d_in × d_out` and optional bias of one graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayerParams {
    pub weight: FeatureMatrix,
    pub bias: Option<Vec<f64>>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    FeatureMatrix::from_vec(rows, cols, data).expect("sizes agree")
}

impl GraphLayerParams {
    pub fn new(weight: FeatureMatrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.n_cols() {
                return Err(Error::Shape(format!(
                    "bias has {} entries, layer outputs {}",
                    b.len(),
                    weight.n_cols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("bias must be finite".into()));
            }
        }
        Ok(Self { weight, bias })
    }

    /// He-style init with std `sqrt(2 / d_in)`; bias starts at zero when enabled.
    pub fn random(d_in: usize, d_out: usize, has_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / d_in.max(1) as f64).sqrt();
        Self {
            weight: gaussian_matrix(d_in, d_out, std, &mut rng),
            bias: has_bias.then(|| vec![0.0; d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.n_rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.n_cols()
    }
}

fn add_bias(m: &mut FeatureMatrix, bias: &[f64]) {
    for i in 0..m.n_rows() {
        for (x, b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn relu_in_place(m: &mut FeatureMatrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `act(Â · H · W + b)`.
pub fn gconv_forward(
    h_prev: &FeatureMatrix,
    adj: &NormAdjacency,
    params: &GraphLayerParams,
    activation: Activation,
) -> Result<FeatureMatrix> {
    Ok(gconv_parts(h_prev, adj, params, activation)?.2)
}

/// (Â·H, pre-activation, activation).
fn gconv_parts(
    h_prev: &FeatureMatrix,
    adj: &NormAdjacency,
    params: &GraphLayerParams,
    activation: Activation,
) -> Result<(FeatureMatrix, FeatureMatrix, FeatureMatrix)> {
    if h_prev.n_cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "features have {} columns, weight has {} rows",
            h_prev.n_cols(),
            params.d_in()
        )));
    }
    let p = adj.apply(h_prev)?;
    let mut z = p.matmul(&params.weight)?;
    if let Some(b) = &params.bias {
        add_bias(&mut z, b);
    }
    let mut h = z.clone();
    if activation == Activation::Relu {
        relu_in_place(&mut h);
    }
    Ok((p, z, h))
}

/// Column-wise mean or max over nodes.
pub fn readout(h: &FeatureMatrix, mode: Readout) -> Result<Vec<f64>> {
    Ok(readout_with_argmax(h, mode)?.0)
}

fn readout_with_argmax(h: &FeatureMatrix, mode: Readout) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = h.n_rows();
    if n == 0 {
        return Err(Error::DegenerateGraph("readout of an empty graph".into()));
    }
    let d = h.n_cols();
    match mode {
        Readout::Mean => {
            let mut z = vec![0.0; d];
            for row in h.rows() {
                for (a, b) in z.iter_mut().zip(row) {
                    *a += b;
                }
            }
            z.iter_mut().for_each(|v| *v /= n as f64);
            Ok((z, Vec::new()))
        }
        Readout::Max => {
            let mut z = h.row(0).to_vec();
            let mut arg = vec![0; d];
            for i in 1..n {
                for (c, &v) in h.row(i).iter().enumerate() {
                    if v > z[c] {
                        z[c] = v;
                        arg[c] = i;
                    }
                }
            }
            Ok((z, arg))
        }
    }
}

/// One dense layer `x · W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: FeatureMatrix,
    pub bias: Vec<f64>,
}

/// Feedforward head with ReLU between layers and a scalar linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::InvalidArgument("MLP needs at least one layer".into()))?;
        if last.weight.n_cols() != 1 {
            return Err(Error::Shape(format!(
                "final MLP layer must output 1 value, got {}",
                last.weight.n_cols()
            )));
        }
        for l in &layers {
            if l.bias.len() != l.weight.n_cols() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape("MLP bias must match layer width".into()));
            }
        }
        for w in layers.windows(2) {
            if w[0].weight.n_cols() != w[1].weight.n_rows() {
                return Err(Error::Shape(format!(
                    "MLP layer outputs {} but next expects {}",
                    w[0].weight.n_cols(),
                    w[1].weight.n_rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [d_in, hidden.., 1]`, He init, zero biases.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "MLP dims need input and output sizes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: gaussian_matrix(w[0], w[1], (2.0 / w[0].max(1) as f64).sqrt(), &mut rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].weight.n_rows()
    }

    /// Row-wise forward; returns (per-layer inputs, pre-activations).
    fn forward_trace(&self, x: &FeatureMatrix) -> Result<(Vec<FeatureMatrix>, Vec<FeatureMatrix>)> {
        if x.n_cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.d_in(),
                x.n_cols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (j, l) in self.layers.iter().enumerate() {
            let mut z = cur.matmul(&l.weight)?;
            add_bias(&mut z, &l.bias);
            let mut next = z.clone();
            if j + 1 < self.layers.len() {
                relu_in_place(&mut next);
            }
            inputs.push(cur);
            pres.push(z);
            cur = next;
        }
        Ok((inputs, pres))
    }

    /// Gradients for `upstream` = dL/dS per row; returns (layer grads, dL/dx).
    fn backward_trace(
        &self,
        inputs: &[FeatureMatrix],
        pres: &[FeatureMatrix],
        upstream: &[f64],
    ) -> Result<(Vec<DenseLayer>, FeatureMatrix)> {
        let mut g = FeatureMatrix::from_vec(upstream.len(), 1, upstream.to_vec())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for j in (0..self.layers.len()).rev() {
            if j + 1 < self.layers.len() {
                for (gv, &z) in g.data_mut().iter_mut().zip(pres[j].data()) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let dw = inputs[j].transpose().matmul(&g)?;
            let db = column_sums(&g);
            let gx = g.matmul(&self.layers[j].weight.transpose())?;
            grads.push(DenseLayer {
                weight: dw,
                bias: db,
            });
            g = gx;
        }
        grads.reverse();
        Ok((grads, g))
    }
}

fn column_sums(m: &FeatureMatrix) -> Vec<f64> {
    let mut s = vec![0.0; m.n_cols()];
    for row in m.rows() {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

/// MLP output for a single input vector.
pub fn mlp_score(input: &[f64], params: &MlpParams) -> Result<f64> {
    let x = FeatureMatrix::from_vec(1, input.len(), input.to_vec())?;
    Ok(mlp_score_rows(&x, params)?[0])
}

/// MLP output for every row.
pub fn mlp_score_rows(x: &FeatureMatrix, params: &MlpParams) -> Result<Vec<f64>> {
    let (inputs, pres) = params.forward_trace(x)?;
    drop(inputs);
    Ok(pres.last().expect("non-empty MLP").data().to_vec())
}

/// Where the MLP head is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One score per graph from the readout vector.
    Graph(Readout),
    /// One score per node from its final features.
    PerNode,
}

#[derive(Debug, Clone)]
struct GraphTrace {
    adj: NormAdjacency,
    /// Per gconv layer: (Â·H_prev, pre-activation).
    layers: Vec<(FeatureMatrix, FeatureMatrix)>,
    n_nodes: usize,
    argmax: Vec<usize>,
    mlp_inputs: Vec<FeatureMatrix>,
    mlp_pres: Vec<FeatureMatrix>,
}

/// Parameter gradients of a [`GraphNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNetGrads {
    pub layers: Vec<GraphLayerParams>,
    pub mlp: Vec<DenseLayer>,
}

/// Stacked graph convolutions followed by an MLP head.
#[derive(Debug, Clone)]
pub struct GraphNet {
    pub layers: Vec<GraphLayerParams>,
    pub mlp: MlpParams,
    pub activation: Activation,
    pub head: Head,
    trace: Option<GraphTrace>,
}

impl GraphNet {
    pub fn new(
        layers: Vec<GraphLayerParams>,
        mlp: MlpParams,
        activation: Activation,
        head: Head,
    ) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::Shape(format!(
                    "graph layer outputs {} but next expects {}",
                    w[0].d_out(),
                    w[1].d_in()
                )));
            }
        }
        if let Some(l) = layers.last() {
            if l.d_out() != mlp.d_in() {
                return Err(Error::Shape(format!(
                    "graph stack outputs {} but MLP expects {}",
                    l.d_out(),
                    mlp.d_in()
                )));
            }
        }
        Ok(Self {
            layers,
            mlp,
            activation,
            head,
            trace: None,
        })
    }

    /// `n_layers` graph layers of width `hidden`, then an MLP `[hidden, hidden, 1]`.
    pub fn random(
        d_in: usize,
        hidden: usize,
        n_layers: usize,
        head: Head,
        seed: u64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        let mut d = d_in;
        for l in 0..n_layers {
            layers.push(GraphLayerParams::random(
                d,
                hidden,
                false,
                seed.wrapping_add(l as u64),
            ));
            d = hidden;
        }
        let mlp = MlpParams::random(&[d, hidden, 1], seed.wrapping_add(1000))?;
        Self::new(layers, mlp, Activation::Relu, head)
    }

    fn run(&self, x: &FeatureMatrix, adj: &NormAdjacency) -> Result<(Vec<f64>, GraphTrace)> {
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let (prop, z, next) = gconv_parts(&h, adj, p, self.activation)?;
            layers.push((prop, z));
            h = next;
        }
        if self.layers.is_empty() && h.n_rows() != adj.n() {
            return Err(Error::Shape("feature rows do not match graph size".into()));
        }
        let (mlp_in, argmax) = match self.head {
            Head::PerNode => (h, Vec::new()),
            Head::Graph(mode) => {
                let (z, arg) = readout_with_argmax(&h, mode)?;
                (FeatureMatrix::from_vec(1, z.len(), z)?, arg)
            }
        };
        let (mlp_inputs, mlp_pres) = self.mlp.forward_trace(&mlp_in)?;
        let scores = mlp_pres.last().expect("non-empty MLP").data().to_vec();
        Ok((
            scores,
            GraphTrace {
                adj: adj.clone(),
                layers,
                n_nodes: x.n_rows(),
                argmax,
                mlp_inputs,
                mlp_pres,
            },
        ))
    }

    /// Scores without keeping a trace: one per node, or a single graph score.
    pub fn evaluate(&self, x: &FeatureMatrix, adj: &NormAdjacency) -> Result<Vec<f64>> {
        Ok(self.run(x, adj)?.0)
    }

    pub fn forward(&mut self, x: &FeatureMatrix, adj: &NormAdjacency) -> Result<Vec<f64>> {
        let (s, t) = self.run(x, adj)?;
        self.trace = Some(t);
        Ok(s)
    }

    /// Smallest |pre-activation| over ReLU units in the retained trace,
    /// `None` before a forward pass.
    pub fn kink_margin(&self) -> Option<f64> {
        let t = self.trace.as_ref()?;
        let gconv = t
            .layers
            .iter()
            .filter(|_| self.activation == Activation::Relu)
            .flat_map(|(_, z)| z.data().iter());
        let hidden = t.mlp_pres[..t.mlp_pres.len() - 1]
            .iter()
            .flat_map(|z| z.data().iter());
        Some(
            gconv
                .chain(hidden)
                .map(|v| v.abs())
                .fold(f64::INFINITY, f64::min),
        )
    }

    /// Reverse-mode gradients for `upstream` = dL/dS, one entry per score.
    pub fn backward(&self, upstream: &[f64]) -> Result<GraphNetGrads> {
        let t = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let expected = t.mlp_inputs[0].n_rows();
        if upstream.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} upstream gradients, got {}",
                upstream.len()
            )));
        }
        let (mlp, g_in) = self
            .mlp
            .backward_trace(&t.mlp_inputs, &t.mlp_pres, upstream)?;

        let d = g_in.n_cols();
        let mut g_h = match self.head {
            Head::PerNode => g_in,
            Head::Graph(Readout::Mean) => {
                let n = t.n_nodes as f64;
                let row: Vec<f64> = g_in.row(0).iter().map(|v| v / n).collect();
                FeatureMatrix::from_rows(&vec![row; t.n_nodes])?
            }
            Head::Graph(Readout::Max) => {
                let mut g = FeatureMatrix::zeros(t.n_nodes, d);
                for (c, &i) in t.argmax.iter().enumerate() {
                    g.set(i, c, g_in.get(0, c));
                }
                g
            }
        };

        let mut layers = Vec::with_capacity(self.layers.len());
        for (p, (prop, z)) in self.layers.iter().zip(&t.layers).rev() {
            if self.activation == Activation::Relu {
                for (g, &zv) in g_h.data_mut().iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let dw = prop.transpose().matmul(&g_h)?;
            let db = p.bias.as_ref().map(|_| column_sums(&g_h));
            let g_prop = g_h.matmul(&p.weight.transpose())?;
            // Â is symmetric, so Âᵀ·G = Â·G.
            g_h = t.adj.apply(&g_prop)?;
            layers.push(GraphLayerParams {
                weight: dw,
                bias: db,
            });
        }
        layers.reverse();
        Ok(GraphNetGrads { layers, mlp })
    }

    /// Visits every trainable scalar together with its gradient.
    pub fn for_each_param_mut(&mut self, grads: &GraphNetGrads, mut f: impl FnMut(&mut f64, f64)) {
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                f(w, d);
            }
            if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
                for (w, &d) in b.iter_mut().zip(gb) {
                    f(w, d);
                }
            }
        }
        for (p, g) in self.mlp.layers.iter_mut().zip(&grads.mlp) {
            for (w, &d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                f(w, d);
            }
            for (w, &d) in p.bias.iter_mut().zip(&g.bias) {
                f(w, d);
            }
        }
    }
}
