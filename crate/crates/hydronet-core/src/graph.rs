//! Directed sewer-network graph.
//!
//! Nodes are manholes (plus one outlet), edges are gravity pipes carrying
//! nine static attributes. Gravity networks are DAGs, so a cyclic input is
//! rejected at build time rather than warned about — the simulator's
//! single-pass routing depends on it. Node and edge order are frozen at
//! construction; every matrix and tensor in the engine indexes by these
//! positions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Number of static attributes on every pipe.
pub const EDGE_ATTR_COUNT: usize = 9;

/// Attribute column names, in storage order.
pub const EDGE_ATTR_NAMES: [&str; EDGE_ATTR_COUNT] = [
    "length",
    "roughness",
    "geom1",
    "slope",
    "gis_length",
    "max_flow",
    "max_velocity",
    "max_full_flow",
    "max_full_depth",
];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid node id: {0}")]
    InvalidNode(String),
    #[error("duplicate node: {0}")]
    DuplicateNode(String),
    #[error("edge {from}->{to} references unknown node {missing}")]
    DanglingEdge {
        from: String,
        to: String,
        missing: String,
    },
    #[error("edge {from}->{to} is invalid: {details}")]
    InvalidEdge {
        from: String,
        to: String,
        details: String,
    },
    #[error("graph contains a directed cycle")]
    CycleDetected,
    #[error("graph is not weakly connected ({0} components)")]
    DisconnectedComponent(usize),
    #[error("outlet {0} has outgoing edges")]
    OutletHasOutflow(String),
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("graph file: {0}")]
    Csv(#[from] csv::Error),
    #[error("graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("nodes file must mark exactly one outlet, found {0}")]
    OutletCount(usize),
}

/// Opaque manhole identifier, e.g. "92090090".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// One gravity pipe with its static attribute vector.
///
/// Serde field names match the `edges.csv` header; `geom1` is the pipe
/// diameter and the two `max_full` columns are ratios against full-pipe
/// capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeEdge {
    pub from: NodeId,
    pub to: NodeId,
    /// ft
    pub length: f64,
    /// Manning n
    pub roughness: f64,
    /// Diameter, ft
    #[serde(rename = "geom1")]
    pub diameter: f64,
    pub slope: f64,
    /// ft
    pub gis_length: f64,
    /// cfs
    pub max_flow: f64,
    /// ft/s
    pub max_velocity: f64,
    #[serde(rename = "max_full_flow")]
    pub max_over_full_flow: f64,
    #[serde(rename = "max_full_depth")]
    pub max_over_full_depth: f64,
}

impl PipeEdge {
    /// Attribute vector in storage order (see [`EDGE_ATTR_NAMES`]).
    pub fn attrs(&self) -> [f64; EDGE_ATTR_COUNT] {
        [
            self.length,
            self.roughness,
            self.diameter,
            self.slope,
            self.gis_length,
            self.max_flow,
            self.max_velocity,
            self.max_over_full_flow,
            self.max_over_full_depth,
        ]
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |details: String| GraphError::InvalidEdge {
            from: self.from.0.clone(),
            to: self.to.0.clone(),
            details,
        };
        if self.from == self.to {
            return Err(bad("self loop".into()));
        }
        for (name, value) in [
            ("length", self.length),
            ("roughness", self.roughness),
            ("geom1", self.diameter),
            ("slope", self.slope),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(bad(format!("{name} must be positive, got {value}")));
            }
        }
        for (name, value) in [
            ("gis_length", self.gis_length),
            ("max_flow", self.max_flow),
            ("max_velocity", self.max_velocity),
            ("max_full_flow", self.max_over_full_flow),
            ("max_full_depth", self.max_over_full_depth),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(bad(format!("{name} must be non-negative, got {value}")));
            }
        }
        Ok(())
    }
}

/// Per-column mean/std used to z-score attribute matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrStats {
    pub mean: [f64; EDGE_ATTR_COUNT],
    pub std: [f64; EDGE_ATTR_COUNT],
}

/// Validated directed pipe network, immutable after construction.
///
/// Not serializable on purpose: a graph always enters through
/// [`build_graph`] (or the CSV loader) so the derived indexes below are
/// never stale.
#[derive(Debug, Clone, PartialEq)]
pub struct PipeGraph {
    nodes: Vec<NodeId>,
    edges: Vec<PipeEdge>,
    outlet: NodeId,
    index: HashMap<String, usize>,
    /// Edge indices arriving at each node, in edge-list order.
    in_edges: Vec<Vec<usize>>,
    /// Edge indices leaving each node, in edge-list order.
    out_edges: Vec<Vec<usize>>,
    /// (from-node-index, to-node-index) per edge.
    endpoints: Vec<(usize, usize)>,
}

/// Validate and index a graph; node/edge positions are frozen thereafter.
pub fn build_graph(
    nodes: Vec<NodeId>,
    edges: Vec<PipeEdge>,
    outlet: NodeId,
) -> Result<PipeGraph, GraphError> {
    if nodes.is_empty() {
        return Err(GraphError::EmptyInput("nodes"));
    }
    if edges.is_empty() {
        return Err(GraphError::EmptyInput("edges"));
    }

    let mut index = HashMap::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if node.0.is_empty() {
            return Err(GraphError::InvalidNode("(empty id)".into()));
        }
        if index.insert(node.0.clone(), i).is_some() {
            return Err(GraphError::DuplicateNode(node.0.clone()));
        }
    }
    if !index.contains_key(&outlet.0) {
        return Err(GraphError::UnknownNode(outlet.0));
    }

    let mut in_edges = vec![Vec::new(); nodes.len()];
    let mut out_edges = vec![Vec::new(); nodes.len()];
    let mut endpoints = Vec::with_capacity(edges.len());
    for (e, edge) in edges.iter().enumerate() {
        edge.validate()?;
        let resolve = |id: &NodeId| {
            index.get(&id.0).copied().ok_or(GraphError::DanglingEdge {
                from: edge.from.0.clone(),
                to: edge.to.0.clone(),
                missing: id.0.clone(),
            })
        };
        let (fi, ti) = (resolve(&edge.from)?, resolve(&edge.to)?);
        out_edges[fi].push(e);
        in_edges[ti].push(e);
        endpoints.push((fi, ti));
    }

    let outlet_idx = index[&outlet.0];
    if !out_edges[outlet_idx].is_empty() {
        return Err(GraphError::OutletHasOutflow(outlet.0));
    }

    // Weak connectivity via union-find over undirected endpoints.
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(f, t) in &endpoints {
        let (rf, rt) = (find(&mut parent, f), find(&mut parent, t));
        if rf != rt {
            parent[rf] = rt;
        }
    }
    let mut roots: Vec<usize> = (0..nodes.len()).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    if roots.len() > 1 {
        return Err(GraphError::DisconnectedComponent(roots.len()));
    }

    let graph = PipeGraph {
        nodes,
        edges,
        outlet,
        index,
        in_edges,
        out_edges,
        endpoints,
    };
    // Kahn's algorithm doubles as the cycle check.
    graph.topological_indices()?;
    Ok(graph)
}

impl PipeGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PipeEdge] {
        &self.edges
    }

    pub fn outlet(&self) -> &NodeId {
        &self.outlet
    }

    pub fn outlet_index(&self) -> usize {
        self.index[&self.outlet.0]
    }

    /// Position of a node in the frozen ordering.
    pub fn node_index(&self, node: &NodeId) -> Result<usize, GraphError> {
        self.index
            .get(&node.0)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(node.0.clone()))
    }

    /// (from-index, to-index) per edge, aligned with `edges()`.
    pub fn endpoints(&self) -> &[(usize, usize)] {
        &self.endpoints
    }

    /// Edge indices arriving at node position `i`, in edge-list order.
    pub fn in_edge_indices(&self, i: usize) -> &[usize] {
        &self.in_edges[i]
    }

    /// Edge indices leaving node position `i`, in edge-list order.
    pub fn out_edge_indices(&self, i: usize) -> &[usize] {
        &self.out_edges[i]
    }

    /// Upstream neighbors of a node as (neighbor, edge-index) pairs.
    pub fn in_neighbors(&self, node: &NodeId) -> Result<Vec<(NodeId, usize)>, GraphError> {
        let i = self.node_index(node)?;
        Ok(self.in_edges[i]
            .iter()
            .map(|&e| (self.nodes[self.endpoints[e].0].clone(), e))
            .collect())
    }

    fn topological_indices(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let mut in_deg: Vec<usize> = self.in_edges.iter().map(Vec::len).collect();
        // Min-heap on node index keeps ties deterministic.
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
            .filter(|&i| in_deg[i] == 0)
            .map(std::cmp::Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse(i)) = ready.pop() {
            order.push(i);
            for &e in &self.out_edges[i] {
                let t = self.endpoints[e].1;
                in_deg[t] -= 1;
                if in_deg[t] == 0 {
                    ready.push(std::cmp::Reverse(t));
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::CycleDetected);
        }
        Ok(order)
    }

    /// Kahn order: every pipe's upstream node precedes its downstream node;
    /// ties broken by node position.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        Ok(self
            .topological_indices()?
            .into_iter()
            .map(|i| self.nodes[i].clone())
            .collect())
    }

    /// Column moments of the raw attribute matrix (population std; a
    /// zero-variance column gets std 1 so z-scoring centers it to zero).
    pub fn attr_stats(&self) -> AttrStats {
        let e = self.edges.len() as f64;
        let mut mean = [0.0; EDGE_ATTR_COUNT];
        let mut std = [0.0; EDGE_ATTR_COUNT];
        for edge in &self.edges {
            for (c, v) in edge.attrs().into_iter().enumerate() {
                mean[c] += v;
            }
        }
        for m in &mut mean {
            *m /= e;
        }
        for edge in &self.edges {
            for (c, v) in edge.attrs().into_iter().enumerate() {
                std[c] += (v - mean[c]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / e).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        AttrStats { mean, std }
    }

    /// `E×9` attribute matrix in edge order; z-scored per column when stats
    /// are given.
    pub fn edge_attr_matrix(&self, stats: Option<&AttrStats>) -> Tensor {
        let mut out = Tensor::zeros(&[self.edges.len(), EDGE_ATTR_COUNT]);
        for (r, edge) in self.edges.iter().enumerate() {
            for (c, v) in edge.attrs().into_iter().enumerate() {
                let value = match stats {
                    Some(s) => (v - s.mean[c]) / s.std[c],
                    None => v,
                };
                out.data_mut()[r * EDGE_ATTR_COUNT + c] = value;
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    node_id: String,
    is_outlet: bool,
}

/// Load a graph from `nodes.csv` (`node_id,is_outlet`) and `edges.csv`
/// (`from,to,length,roughness,geom1,slope,gis_length,max_flow,max_velocity,
/// max_full_flow,max_full_depth`).
pub fn load_graph_csv(
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<PipeGraph, GraphError> {
    let mut nodes = Vec::new();
    let mut outlets = Vec::new();
    let mut reader = csv::Reader::from_path(nodes_path)?;
    for row in reader.deserialize() {
        let row: NodeRow = row?;
        if row.is_outlet {
            outlets.push(NodeId::new(row.node_id.clone()));
        }
        nodes.push(NodeId::new(row.node_id));
    }
    if outlets.len() != 1 {
        return Err(GraphError::OutletCount(outlets.len()));
    }
    let mut edges = Vec::new();
    let mut reader = csv::Reader::from_path(edges_path)?;
    for row in reader.deserialize() {
        edges.push(row?);
    }
    build_graph(nodes, edges, outlets.pop().expect("checked length"))
}

/// Write a graph back to the two-file CSV layout.
pub fn save_graph_csv(
    graph: &PipeGraph,
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<(), GraphError> {
    let mut writer = csv::Writer::from_path(nodes_path)?;
    for node in graph.nodes() {
        writer.serialize(NodeRow {
            node_id: node.0.clone(),
            is_outlet: node == graph.outlet(),
        })?;
    }
    writer.flush()?;
    let mut writer = csv::Writer::from_path(edges_path)?;
    for edge in graph.edges() {
        writer.serialize(edge)?;
    }
    writer.flush()?;
    Ok(())
}
