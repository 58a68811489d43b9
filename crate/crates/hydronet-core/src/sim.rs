//! Synthetic hydraulics: a steady-state stand-in for a calibrated solver.
//!
//! Source manholes receive a diurnal/weekly sinusoidal inflow with Gaussian
//! noise; flow routes downstream in topological order each step (no travel
//! time, no storage), and depths come from Manning's equation on circular
//! pipes in US units (ft, cfs, constant 1.49). Leaks, infiltrations, and
//! blockages multiply or cap flows over a step interval, which is exactly
//! the structure the detector is later asked to find.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, TimeSeriesPanel, CHANNELS};
use crate::graph::{PipeEdge, PipeGraph};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{name} must be positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },
    #[error("flow {flow} cfs exceeds pipe capacity {capacity} cfs")]
    FlowExceedsCapacity { flow: f64, capacity: f64 },
    #[error("normal depth search did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("anomaly target not in graph: {0}")]
    UnknownTarget(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("anomaly file: {0}")]
    Csv(#[from] csv::Error),
}

/// Synthetic panel generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Steps to generate.
    pub duration: usize,
    /// Seconds between steps.
    pub stride: i64,
    /// Inflow at every source manhole, cfs (see `source_bases`).
    pub base_inflow: f64,
    /// Daily oscillation, fraction of base in [0, 1).
    pub diurnal_amplitude: f64,
    /// Weekly oscillation, fraction of base in [0, 1).
    pub weekly_amplitude: f64,
    /// Gaussian noise on each source inflow, cfs.
    pub noise_std: f64,
    pub seed: u64,
    /// Per-source overrides of `base_inflow`, keyed by node id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_bases: Option<BTreeMap<String, f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 2880,
            stride: 600,
            base_inflow: 1.0,
            diurnal_amplitude: 0.3,
            weekly_amplitude: 0.1,
            noise_std: 0.02,
            seed: 42,
            source_bases: None,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.duration == 0 {
            return Err(SimError::InvalidConfig("duration must be ≥ 1".into()));
        }
        if self.stride <= 0 {
            return Err(SimError::InvalidConfig("stride must be positive".into()));
        }
        if !(self.base_inflow > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "base_inflow must be positive, got {}",
                self.base_inflow
            )));
        }
        for (name, a) in [
            ("diurnal_amplitude", self.diurnal_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
        ] {
            if !(0.0..1.0).contains(&a) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {a}"
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "noise_std must be ≥ 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Node flow × (1 − magnitude): water escapes, downstream sees less.
    Leak,
    /// Node flow × (1 + magnitude): groundwater enters.
    Infiltration,
    /// Edge flow capped at (1 − magnitude) × Q_full.
    Blockage,
}

/// One injected fault over `[start, end)` steps.
///
/// `target` is a node id for leak/infiltration, or `from->to` for blockage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub target: String,
    pub start: usize,
    pub end: usize,
    pub magnitude: f64,
}

impl AnomalySpec {
    pub fn active(&self, step: usize) -> bool {
        (self.start..self.end).contains(&step)
    }

    fn validate(&self, duration: usize) -> Result<(), SimError> {
        if self.start >= self.end || self.end > duration {
            return Err(SimError::InvalidConfig(format!(
                "anomaly window [{}, {}) invalid for duration {duration}",
                self.start, self.end
            )));
        }
        if !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "anomaly magnitude must be in (0, 1], got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Full-pipe Manning capacity: Q = (1.49/n)·A·R^(2/3)·√S with A = πD²/4,
/// R = D/4.
pub fn manning_full_flow(diameter: f64, slope: f64, roughness: f64) -> Result<f64, SimError> {
    for (name, value) in [
        ("diameter", diameter),
        ("slope", slope),
        ("roughness", roughness),
    ] {
        if !(value > 0.0) {
            return Err(SimError::NonPositiveInput { name, value });
        }
    }
    let area = PI * diameter * diameter / 4.0;
    let radius = diameter / 4.0;
    Ok(1.49 / roughness * area * radius.powf(2.0 / 3.0) * slope.sqrt())
}

/// Manning flow through a circular pipe at partial depth `y` (ft).
///
/// Uses the circular-segment geometry θ = 2·acos(1 − 2y/D),
/// A = D²/8·(θ − sin θ), P = θD/2. Clamped to [0, Q_full] outside (0, D).
pub fn partial_flow(depth: f64, diameter: f64, slope: f64, roughness: f64) -> f64 {
    if depth <= 0.0 {
        return 0.0;
    }
    if depth >= diameter {
        return manning_full_flow(diameter, slope, roughness).unwrap_or(0.0);
    }
    let theta = 2.0 * (1.0 - 2.0 * depth / diameter).acos();
    let area = diameter * diameter / 8.0 * (theta - theta.sin());
    let perimeter = theta * diameter / 2.0;
    let radius = area / perimeter;
    1.49 / roughness * area * radius.powf(2.0 / 3.0) * slope.sqrt()
}

/// Depth fraction where circular-pipe Manning flow peaks (≈ 0.938·D); flow
/// rises strictly on [0, peak] and Q(peak) > Q_full, so every target flow
/// at or below capacity has exactly one root on the rising branch.
const PEAK_DEPTH_RATIO: f64 = 0.9381;

const MAX_BISECTIONS: usize = 200;

/// Invert Manning's equation: the lowest depth y with Q(y) = `flow`.
///
/// Circular pipes carry slightly more than Q_full just below the crown, so
/// the capacity boundary is pinned explicitly: `flow` = Q_full maps to the
/// full diameter, anything above errors rather than landing on the falling
/// branch.
pub fn normal_depth(flow: f64, edge: &PipeEdge) -> Result<f64, SimError> {
    let capacity = manning_full_flow(edge.diameter, edge.slope, edge.roughness)?;
    if flow < 0.0 {
        return Err(SimError::NonPositiveInput {
            name: "flow",
            value: flow,
        });
    }
    if flow == 0.0 {
        return Ok(0.0);
    }
    if flow >= capacity {
        if flow > capacity {
            return Err(SimError::FlowExceedsCapacity { flow, capacity });
        }
        return Ok(edge.diameter);
    }

    let tolerance = 1e-9 * capacity.max(1.0);
    let q = |y: f64| partial_flow(y, edge.diameter, edge.slope, edge.roughness);
    let mut lo = 0.0;
    let mut hi = PEAK_DEPTH_RATIO * edge.diameter;
    debug_assert!(q(hi) > flow);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let q_mid = q(mid);
        if (q_mid - flow).abs() < tolerance {
            return Ok(mid);
        }
        if q_mid < flow {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SimError::NonConvergence(MAX_BISECTIONS))
}

/// Generate a synthetic panel on `graph`, injecting `anomalies`.
///
/// Per step: source inflows = base·(1 + d·sin(2πt/day) + w·sin(2πt/week))
/// plus Gaussian noise, clamped at zero; flow accumulates in topological
/// order, splitting equally across multiple outgoing pipes; leak and
/// infiltration scale a node's flow while active, blockage caps an edge at
/// a fraction of capacity. Depths come from the routing rules below.
/// Deterministic for a given seed.
pub fn generate_dataset(
    graph: &PipeGraph,
    config: &SimConfig,
    anomalies: &[AnomalySpec],
) -> Result<TimeSeriesPanel, SimError> {
    config.validate()?;
    for a in anomalies {
        a.validate(config.duration)?;
    }

    let n = graph.node_count();
    let order: Vec<usize> = graph
        .topological_order()
        .expect("validated graphs are acyclic")
        .iter()
        .map(|id| graph.node_index(id).expect("own node"))
        .collect();

    // Resolve anomaly targets up front.
    let mut node_anomalies: Vec<Vec<&AnomalySpec>> = vec![Vec::new(); n];
    let mut edge_caps: Vec<Vec<&AnomalySpec>> = vec![Vec::new(); graph.edge_count()];
    for a in anomalies {
        match a.kind {
            AnomalyKind::Leak | AnomalyKind::Infiltration => {
                let i = graph
                    .node_index(&a.target.as_str().into())
                    .map_err(|_| SimError::UnknownTarget(a.target.clone()))?;
                node_anomalies[i].push(a);
            }
            AnomalyKind::Blockage => {
                let e = graph
                    .edges()
                    .iter()
                    .position(|edge| format!("{}->{}", edge.from, edge.to) == a.target)
                    .ok_or_else(|| SimError::UnknownTarget(a.target.clone()))?;
                edge_caps[e].push(a);
            }
        }
    }

    let capacities: Vec<f64> = graph
        .edges()
        .iter()
        .map(|e| manning_full_flow(e.diameter, e.slope, e.roughness))
        .collect::<Result<_, _>>()?;

    let sources: Vec<usize> = (0..n)
        .filter(|&i| graph.in_edge_indices(i).is_empty())
        .collect();
    let mut base_of = vec![config.base_inflow; n];
    if let Some(overrides) = &config.source_bases {
        for (id, base) in overrides {
            let i = graph
                .node_index(&id.as_str().into())
                .map_err(|_| SimError::UnknownTarget(id.clone()))?;
            if !(*base > 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "source base for {id} must be positive, got {base}"
                )));
            }
            base_of[i] = *base;
        }
    }

    let steps_per_day = 86_400.0 / config.stride as f64;
    let steps_per_week = 7.0 * steps_per_day;
    let mut rng = seeds::rng(config.seed, seeds::SIMULATE);
    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).expect("validated std"))
    } else {
        None
    };

    let mut values = Tensor::zeros(&[config.duration, n, CHANNELS]);
    let mut node_flow = vec![0.0; n];
    let mut edge_flow = vec![0.0; graph.edge_count()];
    for t in 0..config.duration {
        let phase = t as f64;
        let seasonal = 1.0
            + config.diurnal_amplitude * (2.0 * PI * phase / steps_per_day).sin()
            + config.weekly_amplitude * (2.0 * PI * phase / steps_per_week).sin();

        // Draw noise for every source each step (graph order) so the
        // stream stays aligned regardless of topology.
        let mut inflow = vec![0.0; n];
        for &s in &sources {
            let mut v = base_of[s] * seasonal;
            if let Some(dist) = &noise {
                v += dist.sample(&mut rng);
            }
            inflow[s] = v.max(0.0);
        }

        for &i in &order {
            let mut total = inflow[i];
            for &e in graph.in_edge_indices(i) {
                total += edge_flow[e];
            }
            for a in &node_anomalies[i] {
                if a.active(t) {
                    total *= match a.kind {
                        AnomalyKind::Leak => 1.0 - a.magnitude,
                        AnomalyKind::Infiltration => 1.0 + a.magnitude,
                        AnomalyKind::Blockage => unreachable!("resolved as edge"),
                    };
                }
            }
            node_flow[i] = total;

            let outs = graph.out_edge_indices(i);
            if !outs.is_empty() {
                let split = total / outs.len() as f64;
                for &e in outs {
                    let mut f = split;
                    for a in &edge_caps[e] {
                        if a.active(t) {
                            f = f.min((1.0 - a.magnitude) * capacities[e]);
                        }
                    }
                    edge_flow[e] = f;
                }
            }
        }

        for i in 0..n {
            let depth = node_depth(graph, i, &edge_flow)?;
            let base = (t * n + i) * CHANNELS;
            values.data_mut()[base] = depth;
            values.data_mut()[base + 1] = node_flow[i];
        }
    }

    let timestamps = (0..config.duration as i64).map(|t| t * config.stride).collect();
    Ok(TimeSeriesPanel::new(
        timestamps,
        graph.nodes().to_vec(),
        values,
    )?)
}

/// Depth rule per node: sources read their first outgoing pipe; a node fed
/// by one pipe reads that pipe; a confluence reads its outgoing pipe when
/// one exists, else (a confluence outlet) its largest inflowing pipe. The
/// pipe is always evaluated at the flow it actually carries.
fn node_depth(graph: &PipeGraph, i: usize, edge_flow: &[f64]) -> Result<f64, SimError> {
    let ins = graph.in_edge_indices(i);
    let outs = graph.out_edge_indices(i);
    let edge_idx = match (ins.len(), outs.len()) {
        (0, _) => outs[0],
        (1, _) => ins[0],
        (_, o) if o > 0 => outs[0],
        _ => *ins
            .iter()
            .max_by(|&&a, &&b| {
                graph.edges()[a]
                    .diameter
                    .partial_cmp(&graph.edges()[b].diameter)
                    .expect("finite diameters")
            })
            .expect("confluence has in-edges"),
    };
    normal_depth(edge_flow[edge_idx], &graph.edges()[edge_idx])
}

/// Write anomaly labels as `kind,target,start,end,magnitude`.
pub fn save_anomalies(anomalies: &[AnomalySpec], path: &Path) -> Result<(), SimError> {
    let mut writer = csv::Writer::from_path(path)?;
    for a in anomalies {
        writer.serialize(a)?;
    }
    writer.flush().map_err(DataError::from)?;
    Ok(())
}

/// Read anomaly labels written by [`save_anomalies`].
pub fn load_anomalies(path: &Path) -> Result<Vec<AnomalySpec>, SimError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
