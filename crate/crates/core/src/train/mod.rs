//! Experiment configuration, the training loop, prediction and experiment
//! suites.

mod config;
mod early_stop;
mod predict;
mod suite;
mod trainer;

pub use config::{EarlyStopping, ExperimentConfig};
pub use early_stop::{early_stop_check, StopDecision};
pub use predict::{
    checkpoint_features, evaluate_checkpoint, predict_topk, Classifier, Evaluation, Prediction,
};
pub use suite::{run_experiment_suite, SuiteRow, SUITE_HEADER};
pub use trainer::{
    run_training, RunResult, RunSummary, Trainer, AVERAGES_FILE, BEST_CHECKPOINT, CURVES_FILE,
    LAST_CHECKPOINT, SPLIT_FILE,
};
