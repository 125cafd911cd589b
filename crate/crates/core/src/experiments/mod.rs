//! Experiment protocols (comparison, anti-noise, active learning,
//! ablation), their configuration, reports and output files.

mod config;
mod output;
mod protocols;
mod report;

pub use config::{
    train_preset, AblationConfig, ActiveConfig, AntinoiseConfig, DataSource, ExperimentConfig, ExperimentKind,
    SplitRatios, TOY_EMBED_LEVELS, TOY_KERNEL_WIDTH, TOY_LR, TOY_PATIENCE, TOY_SIGMA_AUG_SCALE,
};
pub use output::{
    emit_outputs, predictions_header, read_report, write_history, write_prediction_table, write_predictions, HISTORY_FILE, HISTORY_HEADER,
    METRICS_FILE, MODEL_FILE, PREDICTIONS_FILE,
};
pub use protocols::{
    interpolation_mask, parallel_map, run_ablation, run_active_learning, run_antinoise, run_comparison,
    run_experiment, worker_threads, ExperimentRun, Showcase,
};
pub use report::{
    aggregate, Aggregate, Arm, FailureKind, IndexKind, IndexPoint, IndexSeries, MeanStd, Region, RowKey, RunReport,
    RunRow, SeedFailure, REPORT_FORMAT,
};
