//! Dynamic graph learning for sensor time series: attention message
//! passing over a per-step adjacency, per-node GRUs, and graph
//! re-estimation from the learned node embeddings.

pub mod data;
pub mod error;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod training;

pub use data::{
    generate_synthetic, load_csv, mask_labels, normalize_features, save_csv, CoordinateSystem,
    CsvOptions, NormalizationStats, SensorDataset, SyntheticSpec,
};
pub use error::{Error, Result};
pub use graph::{build_initial_graph, reconstruct_adjacency, TemporalGraph};
pub use io::{load_checkpoint, load_predictions_csv, save_checkpoint, save_predictions_csv};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{evaluate, EvalReport};
pub use model::{forward_all, Activation, ModelDims, ModelParams, Predictions};
pub use training::{
    compute_gradients, forecast, forecast_test, train, train_with, Ablation, TrainConfig,
    TrainFailure, TrainOutcome, TrainedModel, TrainingLog, Weighting,
};
