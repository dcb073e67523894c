//! Training: configuration, models, optimizer, checkpoints and metrics.

mod checkpoint;
mod config;
mod data;
mod experiment;
mod metrics;
mod model;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{
    ContinuousConfig, ContinuousVariant, DiscreteConfig, FieldConfig, GaugeKind, GridConfig, HashConfig, LogitKind,
    RegConfig, RegKind, SceneConfig, TrainConfig,
};
pub use experiment::{
    continuous_base, discrete_base, discrete_inforeg, grid_base, run_config, run_preset, summarize, ExperimentResult, Preset,
    RunSummary, DEFAULT_SEEDS,
};
pub use data::{rig_rays, scene_rigs, surface_samples, Dataset, SURFACE_WEIGHT};
pub use metrics::{
    evaluate, model_occupancy, occupancy_from_coords, occupancy_metric, render_views, utilization_from_selection,
    utilization_metric, EvalReport, MetricLog, MetricRow, RayRenderer, METRIC_HEADER,
};
pub use model::{Body, Model, PointOutput, RayBatch, TextureGauge};
pub use optim::{Adam, AdamConfig};
pub use run::{fit_inverse_gauge, init_model, learning_rate, stream_rng, train, train_on, FittedInverse, InverseFit, TrainOutput};
