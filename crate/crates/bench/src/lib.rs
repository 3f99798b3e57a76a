//! Shared fixtures for the benchmarks.

use dglr::training::{init_params, initial_graph};
use dglr::{
    generate_synthetic, normalize_features, ModelParams, SensorDataset, SyntheticSpec,
    TemporalGraph, TrainConfig,
};

/// Normalized synthetic dataset with `nodes` sites, plus initialized
/// parameters and the initial graph.
pub fn fixture(nodes: usize, steps: usize) -> (SensorDataset, ModelParams, TemporalGraph) {
    let spec = SyntheticSpec {
        nodes,
        steps,
        clusters: 3.min(nodes),
        ..SyntheticSpec::default()
    };
    let (data, _) = normalize_features(&generate_synthetic(&spec, 1).expect("valid spec"));
    let config = TrainConfig::default();
    let params = init_params(&data, &config);
    let graph = initial_graph(&data, &config).expect("valid graph");
    (data, params, graph)
}
