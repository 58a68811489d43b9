//! The spatiotemporal forecaster.
//!
//! Two blocks, each a sandwich of gated temporal convolution → edge-aware
//! message passing (weight-shared across the remaining time steps) → gated
//! temporal convolution, followed by a head that collapses the leftover
//! steps with one wide convolution and maps each node to all H·2 outputs at
//! once. Messages travel only in pipe direction, so an upstream node can
//! never see downstream state. Everything runs on the reverse-mode tape;
//! `forward` is pure given (window, graph, params).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CHANNELS;
use crate::graph::{GraphError, PipeGraph, EDGE_ATTR_COUNT};
use crate::seeds;
use crate::tensor::{Tape, TapeId, Tensor, TensorError};

use rand::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HydroNetConfig {
    /// Input steps L.
    pub lookback: usize,
    /// Forecast steps H.
    pub horizon: usize,
    pub hidden_channels: usize,
    /// Edge embedding width d.
    pub edge_embed_dim: usize,
    /// Temporal kernel K.
    pub temporal_kernel: usize,
    pub blocks: usize,
    /// Ablation switch: also pass messages against pipe direction.
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for HydroNetConfig {
    fn default() -> Self {
        Self {
            lookback: 12,
            horizon: 12,
            hidden_channels: 32,
            edge_embed_dim: 16,
            temporal_kernel: 3,
            blocks: 2,
            bidirectional: false,
            seed: 42,
        }
    }
}

impl HydroNetConfig {
    /// Steps left after all blocks: each block runs two K-wide valid convs.
    pub fn head_steps(&self) -> isize {
        self.lookback as isize
            - (2 * self.blocks * (self.temporal_kernel - 1)) as isize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("hidden_channels", self.hidden_channels),
            ("edge_embed_dim", self.edge_embed_dim),
            ("temporal_kernel", self.temporal_kernel),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        let remaining = self.head_steps();
        if remaining < 1 {
            return Err(ModelError::InvalidConfig(format!(
                "lookback {} leaves {} steps after {} blocks of two {}-wide convolutions",
                self.lookback, remaining, self.blocks, self.temporal_kernel
            )));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors. Order is frozen at init and shared by
/// checkpoints, the optimizer state, and tape registration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Position of a named tensor in the frozen order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Rebuild from (name, tensor) pairs, e.g. a decoded checkpoint.
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { entries, index }
    }

    /// Register every tensor as a differentiable leaf, in order.
    pub fn register_leaves(&self, tape: &mut Tape) -> Vec<TapeId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Register every tensor as a constant (inference path).
    pub fn register_constants(&self, tape: &mut Tape) -> Vec<TapeId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect()
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Initialize all parameters: weights uniform(±√(1/fan_in)), biases zero,
/// drawn in registration order from the param-init stream of `seed`.
pub fn init_params(config: &HydroNetConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = seeds::rng(config.seed, seeds::PARAM_INIT);
    let (hid, d, k) = (
        config.hidden_channels,
        config.edge_embed_dim,
        config.temporal_kernel,
    );
    let mut params = ModelParams::new();

    let conv = |params: &mut ModelParams, name: String, c_in: usize, rng: &mut _| {
        let fan = k * c_in;
        params.push(format!("{name}.value_w"), uniform_init(&[k, c_in, hid], fan, rng));
        params.push(format!("{name}.value_b"), Tensor::zeros(&[hid]));
        params.push(format!("{name}.gate_w"), uniform_init(&[k, c_in, hid], fan, rng));
        params.push(format!("{name}.gate_b"), Tensor::zeros(&[hid]));
    };
    let mlp = |params: &mut ModelParams, name: String, c_in: usize, rng: &mut _| {
        params.push(format!("{name}.w1"), uniform_init(&[c_in, hid], c_in, rng));
        params.push(format!("{name}.b1"), Tensor::zeros(&[hid]));
        params.push(format!("{name}.w2"), uniform_init(&[hid, hid], hid, rng));
        params.push(format!("{name}.b2"), Tensor::zeros(&[hid]));
    };

    params.push(
        "w_a".into(),
        uniform_init(&[EDGE_ATTR_COUNT, d], EDGE_ATTR_COUNT, &mut rng),
    );
    for b in 0..config.blocks {
        let c_in = if b == 0 { CHANNELS } else { hid };
        conv(&mut params, format!("block{b}.conv_in"), c_in, &mut rng);
        mlp(&mut params, format!("block{b}.message"), hid + d, &mut rng);
        mlp(&mut params, format!("block{b}.update"), 2 * hid, &mut rng);
        conv(&mut params, format!("block{b}.conv_out"), hid, &mut rng);
    }
    let head_k = config.head_steps() as usize;
    params.push(
        "head.conv_w".into(),
        uniform_init(&[head_k, hid, hid], head_k * hid, &mut rng),
    );
    params.push("head.conv_b".into(), Tensor::zeros(&[hid]));
    params.push(
        "head.out_w".into(),
        uniform_init(&[hid, config.horizon * CHANNELS], hid, &mut rng),
    );
    params.push(
        "head.out_b".into(),
        Tensor::zeros(&[config.horizon * CHANNELS]),
    );
    Ok(params)
}

/// Parameter tape handles addressed by name.
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    ids: &'a [TapeId],
}

impl<'a> BoundParams<'a> {
    pub fn new(params: &'a ModelParams, ids: &'a [TapeId]) -> Self {
        assert_eq!(params.len(), ids.len(), "one tape id per parameter");
        Self { params, ids }
    }

    fn id(&self, name: &str) -> TapeId {
        self.ids[self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// Gated temporal convolution: conv_value(x) ⊙ sigmoid(conv_gate(x)),
/// per-node, valid padding along the time axis.
pub fn gated_conv_on_tape(
    tape: &mut Tape,
    x: TapeId,
    value_w: TapeId,
    value_b: TapeId,
    gate_w: TapeId,
    gate_b: TapeId,
) -> Result<TapeId, TensorError> {
    let value = tape.conv1d(x, value_w, value_b)?;
    let gate = tape.conv1d(x, gate_w, gate_b)?;
    let gate = tape.sigmoid(gate);
    tape.mul(value, gate)
}

/// Linear edge embedding: attrs · W_a, no bias.
pub fn embed_edges_on_tape(
    tape: &mut Tape,
    attrs: TapeId,
    w_a: TapeId,
) -> Result<TapeId, TensorError> {
    tape.matmul(attrs, w_a)
}

/// The forecaster bound to one graph: endpoint indices and the z-scored
/// attribute matrix are frozen here so `forward` only touches tensors.
#[derive(Debug, Clone)]
pub struct HydroNet {
    config: HydroNetConfig,
    n_nodes: usize,
    /// Message routes: (source node, destination node, edge index). With
    /// `bidirectional` each pipe also appears reversed, sharing its
    /// embedding row.
    routes: Vec<(usize, usize, usize)>,
    attrs_z: Tensor,
}

impl HydroNet {
    pub fn new(config: HydroNetConfig, graph: &PipeGraph) -> Result<Self, ModelError> {
        config.validate()?;
        let stats = graph.attr_stats();
        let attrs_z = graph.edge_attr_matrix(Some(&stats));
        let mut routes: Vec<(usize, usize, usize)> = graph
            .endpoints()
            .iter()
            .enumerate()
            .map(|(e, &(f, t))| (f, t, e))
            .collect();
        if config.bidirectional {
            let reversed: Vec<_> = graph
                .endpoints()
                .iter()
                .enumerate()
                .map(|(e, &(f, t))| (t, f, e))
                .collect();
            routes.extend(reversed);
        }
        Ok(Self {
            config,
            n_nodes: graph.node_count(),
            routes,
            attrs_z,
        })
    }

    pub fn config(&self) -> &HydroNetConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    /// One message-passing sweep on `reps` stacked time slices.
    ///
    /// `h` is `[reps·N, hidden]`; every slice uses the same weights. Each
    /// route gathers its source row, concatenates the edge embedding, runs
    /// the message MLP, and scatter-sums onto its destination row; nodes
    /// without incoming routes aggregate zero and still pass through the
    /// update MLP.
    fn mpnn_on_tape(
        &self,
        tape: &mut Tape,
        h: TapeId,
        reps: usize,
        embeds: TapeId,
        bound: &BoundParams,
        block: usize,
    ) -> Result<TapeId, TensorError> {
        let n = self.n_nodes;
        let rows = reps * n;
        let gather: Vec<usize> = (0..reps)
            .flat_map(|t| self.routes.iter().map(move |&(f, _, _)| t * n + f))
            .collect();
        let scatter: Vec<usize> = (0..reps)
            .flat_map(|t| self.routes.iter().map(move |&(_, to, _)| t * n + to))
            .collect();

        let h_src = tape.gather_rows(h, &gather)?;
        // Tile embeddings across time by stacking: backward sums the copies.
        let tiled = if reps == 1 {
            embeds
        } else {
            let copies = vec![embeds; reps];
            tape.concat(&copies, 0)?
        };
        let msg_in = tape.concat(&[h_src, tiled], 1)?;
        let msg = self.mlp_on_tape(tape, msg_in, bound, &format!("block{block}.message"))?;
        let agg = tape.scatter_sum(msg, &scatter, rows)?;
        let upd_in = tape.concat(&[h, agg], 1)?;
        self.mlp_on_tape(tape, upd_in, bound, &format!("block{block}.update"))
    }

    fn mlp_on_tape(
        &self,
        tape: &mut Tape,
        x: TapeId,
        bound: &BoundParams,
        name: &str,
    ) -> Result<TapeId, TensorError> {
        let z = tape.matmul(x, bound.id(&format!("{name}.w1")))?;
        let z = tape.add(z, bound.id(&format!("{name}.b1")))?;
        let z = tape.relu(z);
        let z = tape.matmul(z, bound.id(&format!("{name}.w2")))?;
        tape.add(z, bound.id(&format!("{name}.b2")))
    }

    /// Single-slice message passing, exposed for tests: `[N×hidden]` in and
    /// out. `embeds` must be `[routes×d]` when given; defaults to the bound
    /// graph's embedding of its own attributes under `w_a`.
    pub fn mpnn_layer(
        &self,
        tape: &mut Tape,
        h: TapeId,
        embeds: TapeId,
        bound: &BoundParams,
        block: usize,
    ) -> Result<TapeId, TensorError> {
        self.mpnn_on_tape(tape, h, 1, embeds, bound, block)
    }

    /// Full forward pass on an existing tape; `window` is `[L, N, 2]` in
    /// normalized units, output is `[H, N, 2]` in normalized units.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        window: TapeId,
        bound: &BoundParams,
    ) -> Result<TapeId, TensorError> {
        let (l, n) = (self.config.lookback, self.n_nodes);
        let shape = tape.value(window).shape().to_vec();
        if shape != [l, n, CHANNELS] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                details: format!("window {shape:?}, expected [{l}, {n}, {CHANNELS}]"),
            });
        }
        let hid = self.config.hidden_channels;

        let attrs = tape.constant(self.attrs_z.clone());
        let w_a = bound.id("w_a");
        let embeds_once = embed_edges_on_tape(tape, attrs, w_a)?;
        // With bidirectional routes each pipe's embedding row serves both
        // directions, so stack the matrix twice.
        let embeds = if self.routes.len() == 2 * self.attrs_z.shape()[0] {
            tape.concat(&[embeds_once, embeds_once], 0)?
        } else {
            embeds_once
        };

        let mut h = window;
        let mut steps = l;
        for b in 0..self.config.blocks {
            let name = format!("block{b}.conv_in");
            h = gated_conv_on_tape(
                tape,
                h,
                bound.id(&format!("{name}.value_w")),
                bound.id(&format!("{name}.value_b")),
                bound.id(&format!("{name}.gate_w")),
                bound.id(&format!("{name}.gate_b")),
            )?;
            steps -= self.config.temporal_kernel - 1;

            let flat = tape.reshape(h, vec![steps * n, hid])?;
            let mixed = self.mpnn_on_tape(tape, flat, steps, embeds, bound, b)?;
            h = tape.reshape(mixed, vec![steps, n, hid])?;

            let name = format!("block{b}.conv_out");
            h = gated_conv_on_tape(
                tape,
                h,
                bound.id(&format!("{name}.value_w")),
                bound.id(&format!("{name}.value_b")),
                bound.id(&format!("{name}.gate_w")),
                bound.id(&format!("{name}.gate_b")),
            )?;
            steps -= self.config.temporal_kernel - 1;
        }

        // Head: one conv spanning every remaining step, then a per-node
        // linear map to the whole horizon.
        let collapsed = tape.conv1d(h, bound.id("head.conv_w"), bound.id("head.conv_b"))?;
        let per_node = tape.reshape(collapsed, vec![n, hid])?;
        let out = tape.matmul(per_node, bound.id("head.out_w"))?;
        let out = tape.add(out, bound.id("head.out_b"))?;
        // [N, H·2] -> [N, H, 2] -> [H, N, 2]
        let out = tape.reshape(out, vec![n, self.config.horizon, CHANNELS])?;
        tape.permute(out, &[1, 0, 2])
    }

    /// Inference convenience: fresh tape, constant parameters.
    pub fn forward(&self, window: &Tensor, params: &ModelParams) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let ids = params.register_constants(&mut tape);
        let bound = BoundParams::new(params, &ids);
        let w = tape.constant(window.clone());
        let out = self.forward_on_tape(&mut tape, w, &bound)?;
        Ok(tape.value(out).clone())
    }
}
