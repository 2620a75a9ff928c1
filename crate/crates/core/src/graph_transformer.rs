//! Context updates over a predicted scene graph.
//!
//! Each layer transforms the incoming edge tensor, lets every node attend to
//! its outgoing (head role) and incoming (tail role) edges, adds the two
//! aggregated messages to the node, and refines the result with a residual
//! feed-forward block; both residual sums are layer-normalized. All layers
//! but the last also produce a learned pairwise adjacency tensor that
//! replaces the edge tensor for the next layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::params::BoundParams;
use crate::tensor::rng::{xavier_uniform, Rng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_SLOPE: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Node width; inputs and outputs share it because of the residual sums.
    pub node_width: usize,
    /// Width of the predicted edge tensor fed to the first layer.
    pub edge_width: usize,
    /// Width of the adjacency tensor passed between layers (even).
    pub adj_width: usize,
    pub layers: usize,
    pub slope: f64,
    pub eps: f64,
}

impl TransformerConfig {
    pub fn new(node_width: usize, edge_width: usize, adj_width: usize, layers: usize) -> Self {
        TransformerConfig {
            node_width,
            edge_width,
            adj_width,
            layers,
            slope: DEFAULT_SLOPE,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros([fan_out])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::ones([width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([width])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AdjacencyParams {
    head: Linear,
    tail: Linear,
    scorer: Linear,
}

/// Weights of one context-update layer.
#[derive(Clone, Debug)]
pub struct ContextUpdateLayer {
    index: usize,
    node_width: usize,
    edge_in: usize,
    adj_width: usize,
    slope: f64,
    eps: f64,
    edge: Linear,
    scorer: Linear,
    ffn1: Linear,
    ffn2: Linear,
    norm1: Norm,
    norm2: Norm,
    adjacency: Option<AdjacencyParams>,
}

/// Intermediate values of one context update, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ContextTrace {
    /// Neighbor attention for outgoing edges, `N × N`, rows sum to one.
    pub alpha_head: Var,
    /// Neighbor attention for incoming edges, `N × N`, rows sum to one.
    pub alpha_tail: Var,
    /// Standardized residual sums before the affine step of each LayerNorm.
    pub pre_affine_1: Var,
    pub pre_affine_2: Var,
    pub z_hat: Var,
}

/// Output of one layer: new node features and, unless this is the last
/// layer, the adjacency tensor for the next one.
#[derive(Clone, Copy, Debug)]
pub struct ContextState {
    pub z: Var,
    pub adjacency: Option<Var>,
    pub layer: usize,
    pub trace: ContextTrace,
}

impl ContextUpdateLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        index: usize,
        cfg: &TransformerConfig,
        with_adjacency: bool,
        rng: &mut Rng,
    ) -> Self {
        let f = cfg.node_width;
        let edge_in = if index == 0 {
            cfg.edge_width
        } else {
            cfg.adj_width
        };
        let half = cfg.adj_width / 2;
        let name = |s: &str| format!("{prefix}.layer{index}.{s}");
        let adjacency = with_adjacency.then(|| AdjacencyParams {
            head: Linear::new(store, &name("head"), f, half, rng),
            tail: Linear::new(store, &name("tail"), f, half, rng),
            scorer: Linear::new(store, &name("adj_scorer"), edge_in + half, 1, rng),
        });
        ContextUpdateLayer {
            index,
            node_width: f,
            edge_in,
            adj_width: cfg.adj_width,
            slope: cfg.slope,
            eps: cfg.eps,
            edge: Linear::new(store, &name("edge"), edge_in, f, rng),
            scorer: Linear::new(store, &name("scorer"), 2 * f, 1, rng),
            ffn1: Linear::new(store, &name("ffn1"), f, f, rng),
            ffn2: Linear::new(store, &name("ffn2"), f, f, rng),
            norm1: Norm::new(store, &name("norm1"), f),
            norm2: Norm::new(store, &name("norm2"), f),
            adjacency,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn has_adjacency(&self) -> bool {
        self.adjacency.is_some()
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, nodes: Var, edges: Var, l: usize) -> Result<usize> {
        if l != self.index {
            return Err(Error::Config(format!(
                "layer {} invoked as layer {l}: {} edges expected",
                self.index,
                if self.index == 0 {
                    "predicted"
                } else {
                    "adjacency"
                }
            )));
        }
        let n = match *tape.shape(nodes) {
            [n, f] if f == self.node_width && n >= 1 => n,
            ref s => return Err(Error::dim("context_update nodes", s, &[0, self.node_width])),
        };
        if tape.shape(edges) != [n, n, self.edge_in] {
            return Err(Error::dim(
                "context_update edges",
                tape.shape(edges),
                &[n, n, self.edge_in],
            ));
        }
        Ok(n)
    }

    /// Node update for layer `l`: `nodes` are the proposals when `l = 0` and
    /// the previous layer's output otherwise; `edges` likewise are the
    /// predicted edges or the previous adjacency.
    pub fn context_update<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        nodes: Var,
        edges: Var,
        l: usize,
    ) -> Result<(Var, ContextTrace)> {
        let n = self.check(tape, nodes, edges, l)?;
        let slope = T::of(self.slope);
        let flat = tape.reshape(edges, &[n * n, self.edge_in])?;
        let f_out = self.edge.apply(tape, p, flat)?;
        // row (i, j) of f_in holds the edge j → i
        let transposed: Vec<usize> = (0..n * n).map(|ij| (ij % n) * n + ij / n).collect();
        let f_in = tape.gather(f_out, &transposed)?;
        let owner: Vec<usize> = (0..n * n).map(|ij| ij / n).collect();
        let n_rep = tape.gather(nodes, &owner)?;

        let mut messages = Vec::with_capacity(2);
        let mut alphas = Vec::with_capacity(2);
        for f in [f_out, f_in] {
            let s_in = tape.concat(&[f, n_rep], 1)?;
            let s = self.scorer.apply(tape, p, s_in)?;
            let s = tape.leaky_relu(s, slope)?;
            let s = tape.reshape(s, &[n, n])?;
            let alpha = tape.softmax(s, 1)?;
            let a3 = tape.reshape(alpha, &[n, 1, n])?;
            let f3 = tape.reshape(f, &[n, n, self.node_width])?;
            let m = tape.batch_matmul(a3, f3)?;
            messages.push(tape.reshape(m, &[n, self.node_width])?);
            alphas.push(alpha);
        }
        let eps = T::of(self.eps);
        let sum = tape.add(nodes, messages[0])?;
        let sum = tape.add(sum, messages[1])?;
        let pre1 = tape.normalize(sum, eps)?;
        let z_hat = tape.scale_cols(pre1, p.var(self.norm1.gain))?;
        let z_hat = tape.add_bias(z_hat, p.var(self.norm1.bias))?;

        let h = self.ffn1.apply(tape, p, z_hat)?;
        let h = tape.leaky_relu(h, slope)?;
        let h = self.ffn2.apply(tape, p, h)?;
        let h = tape.leaky_relu(h, slope)?;
        let res = tape.add(z_hat, h)?;
        let pre2 = tape.normalize(res, eps)?;
        let z = tape.scale_cols(pre2, p.var(self.norm2.gain))?;
        let z = tape.add_bias(z, p.var(self.norm2.bias))?;
        Ok((
            z,
            ContextTrace {
                alpha_head: alphas[0],
                alpha_tail: alphas[1],
                pre_affine_1: pre1,
                pre_affine_2: pre2,
                z_hat,
            },
        ))
    }

    /// Pairwise adjacency for the next layer, `N × N × F_a`.
    ///
    /// Node `i` as head scores each outgoing edge `δ_ij` against `ℋ(n_i)`;
    /// node `j` as tail scores the same edge against `𝒯(n_j)`. A softmax
    /// over the two roles weights the halves of `[ℋ(n_i) ⊕ 𝒯(n_j)]`.
    pub fn update_adjacency<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        nodes: Var,
        edges: Var,
        l: usize,
    ) -> Result<Var> {
        let n = self.check(tape, nodes, edges, l)?;
        let adj = self.adjacency.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "layer {} is last and has no adjacency update",
                self.index
            ))
        })?;
        let slope = T::of(self.slope);
        let h_head = adj.head.apply(tape, p, nodes)?;
        let h_tail = adj.tail.apply(tape, p, nodes)?;
        let flat = tape.reshape(edges, &[n * n, self.edge_in])?;
        let (src, dst): (Vec<usize>, Vec<usize>) = (0..n * n).map(|ij| (ij / n, ij % n)).unzip();
        let head_i = tape.gather(h_head, &src)?;
        let tail_j = tape.gather(h_tail, &dst)?;

        let mut logits = Vec::with_capacity(2);
        for h in [head_i, tail_j] {
            let x = tape.concat(&[flat, h], 1)?;
            let s = adj.scorer.apply(tape, p, x)?;
            logits.push(tape.leaky_relu(s, slope)?);
        }
        let stacked = tape.concat(&logits, 1)?;
        let coef = tape.softmax(stacked, 1)?;
        let c_head = tape.narrow(coef, 0, 1)?;
        let c_tail = tape.narrow(coef, 1, 1)?;
        let a_head = tape.scale_rows(head_i, c_head)?;
        let a_tail = tape.scale_rows(tail_j, c_tail)?;
        let a = tape.concat(&[a_head, a_tail], 1)?;
        tape.reshape(a, &[n, n, self.adj_width])
    }

    /// Context update followed, when another layer follows, by the adjacency update.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        nodes: Var,
        edges: Var,
        l: usize,
    ) -> Result<ContextState> {
        let (z, trace) = self.context_update(tape, p, nodes, edges, l)?;
        let adjacency = match self.adjacency {
            Some(_) => Some(self.update_adjacency(tape, p, nodes, edges, l)?),
            None => None,
        };
        Ok(ContextState {
            z,
            adjacency,
            layer: l,
            trace,
        })
    }
}

/// A stack of `L ≥ 1` context-update layers.
#[derive(Clone, Debug)]
pub struct GraphTransformer {
    config: TransformerConfig,
    layers: Vec<ContextUpdateLayer>,
}

impl GraphTransformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: TransformerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config(
                "graph transformer needs at least one layer".into(),
            ));
        }
        if config.node_width == 0 || config.edge_width == 0 {
            return Err(Error::Config(
                "graph transformer widths must be positive".into(),
            ));
        }
        if config.layers > 1 && (config.adj_width == 0 || !config.adj_width.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "adjacency width {} must be positive and even",
                config.adj_width
            )));
        }
        if !(config.slope > 0.0 && config.eps > 0.0) {
            return Err(Error::Config("slope and eps must be positive".into()));
        }
        let layers = (0..config.layers)
            .map(|l| ContextUpdateLayer::new(store, prefix, l, &config, l + 1 < config.layers, rng))
            .collect();
        Ok(GraphTransformer { config, layers })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ContextUpdateLayer] {
        &self.layers
    }

    /// Runs every layer and returns the per-layer states; the edge tensor
    /// of the last layer is discarded.
    pub fn run_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        nodes: Var,
        edges: Var,
    ) -> Result<Vec<ContextState>> {
        let mut states = Vec::with_capacity(self.layers.len());
        let (mut nodes, mut edges) = (nodes, edges);
        for (l, layer) in self.layers.iter().enumerate() {
            let st = layer.step(tape, p, nodes, edges, l)?;
            nodes = st.z;
            if let Some(a) = st.adjacency {
                edges = a;
            }
            states.push(st);
        }
        Ok(states)
    }

    /// Final node features `Z` (`N × F`).
    pub fn run_stack<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        nodes: Var,
        edges: Var,
    ) -> Result<Var> {
        let states = self.run_traced(tape, p, nodes, edges)?;
        Ok(states.last().expect("at least one layer").z)
    }
}
