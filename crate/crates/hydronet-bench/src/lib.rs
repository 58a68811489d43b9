//! Shared fixtures for the benchmark targets: a small synthetic network
//! and ready-made windows, so every bench measures engine work rather
//! than setup.

use hydronet_core::dataset::{
    apply_normalizer, fit_normalizer, make_windows, Window, WindowSpec,
};
use hydronet_core::graph::{build_graph, NodeId, PipeEdge, PipeGraph};
use hydronet_core::sim::{generate_dataset, SimConfig};

/// Eight-node tree: four sources, two confluences, a trunk, one outlet.
pub fn demo_tree() -> PipeGraph {
    let e = |from: &str, to: &str, length: f64, roughness: f64, diameter: f64, slope: f64| {
        PipeEdge {
            from: from.into(),
            to: to.into(),
            length,
            roughness,
            diameter,
            slope,
            gis_length: length * 1.035,
            max_flow: diameter * 4.0 + slope * 50.0,
            max_velocity: 3.0 + slope * 40.0,
            max_over_full_flow: 0.5 + slope * 10.0,
            max_over_full_depth: 0.45 + slope * 9.0,
        }
    };
    build_graph(
        ["m1", "m2", "m3", "m4", "m5", "m6", "m7", "out"]
            .map(NodeId::from)
            .to_vec(),
        vec![
            e("m1", "m3", 320.0, 0.012, 1.0, 0.0125),
            e("m2", "m3", 280.0, 0.013, 1.0, 0.016),
            e("m3", "m5", 450.0, 0.013, 1.33, 0.009),
            e("m4", "m5", 360.0, 0.011, 1.0, 0.02),
            e("m5", "m7", 520.0, 0.014, 1.67, 0.0063),
            e("m6", "m7", 300.0, 0.012, 1.0, 0.014),
            e("m7", "out", 610.0, 0.015, 2.0, 0.005),
        ],
        "out".into(),
    )
    .expect("demo tree is a valid single-outlet DAG")
}

/// Normalized training windows from a short simulated panel.
pub fn training_windows(graph: &PipeGraph, duration: usize) -> Vec<Window> {
    let config = SimConfig {
        duration,
        ..SimConfig::default()
    };
    let panel = generate_dataset(graph, &config, &[]).expect("simulate");
    let norm = fit_normalizer(&panel, false).expect("normalizer");
    make_windows(&apply_normalizer(&panel, &norm), &WindowSpec::default()).expect("windows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_well_formed() {
        let graph = demo_tree();
        assert_eq!(graph.node_count(), 8);
        let windows = training_windows(&graph, 120);
        assert!(!windows.is_empty());
        assert_eq!(windows[0].input.shape(), &[12, 8, 2]);
    }
}
