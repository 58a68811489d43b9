//! Engine for forecasting hydraulics in underground wastewater networks.
//!
//! The pipeline: a directed pipe graph ([`graph`]), observed or simulated
//! depth/flow panels ([`dataset`], [`sim`]), a spatiotemporal message-passing
//! forecaster built on a small reverse-mode tape ([`model`], [`tensor`]),
//! deterministic training ([`train`]), and forecast metrics plus residual
//! anomaly flagging ([`eval`]). Everything is 64-bit and seeded; identical
//! configs reproduce identical bytes.

pub mod dataset;
pub mod eval;
pub mod graph;
pub mod model;
pub mod seeds;
pub mod sim;
pub mod tensor;
pub mod train;

pub use dataset::{DataError, NormStats, SplitSpec, TimeSeriesPanel, WindowSpec};
pub use eval::{evaluate, AnomalyEvent, ChannelMetrics, EvalError, MetricReport, ResidualStats};
pub use graph::{build_graph, GraphError, NodeId, PipeEdge, PipeGraph};
pub use model::{init_params, BoundParams, HydroNet, HydroNetConfig, ModelError, ModelParams};
pub use sim::{AnomalyKind, AnomalySpec, SimConfig, SimError};
pub use tensor::{finite_diff_check, GradCheckReport, Tape, TapeId, Tensor, TensorError};
pub use train::{
    load_checkpoint, save_checkpoint, train, Checkpoint, LossKind, TrainConfig, TrainError,
};
