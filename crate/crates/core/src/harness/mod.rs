//! Config-driven experiments: training runs, multi-seed aggregation, sweeps
//! and train/test ratio grids.

mod config;
mod stats;
mod sweep;
mod train;

pub use config::{DatasetSource, ExperimentConfig, LossKind, MajorityGrowth, MethodConfig};
pub use stats::{
    misalignment, misalignment_steps, percent_improvement, sample_variance, AccuracyGrid, ImprovementMode,
    TrialAggregate,
};
pub use sweep::{
    aggregate_file_name, apply_axis, checkpoint_file_name, read_json, run_experiment, run_ratio_grid, run_sweep,
    trial_file_name, write_json, ExperimentSummary, RatioGridResult, SeedGrid, SweepAxis, SweepMetric, SweepOptions,
    SweepResult, SweepRow,
};
pub use train::{
    curate_test, derive_seed, init_model, prepare_data, run_training, BatchContext, EpochAccuracy, PreparedData,
    TrainedTrial, TrialReport,
};
