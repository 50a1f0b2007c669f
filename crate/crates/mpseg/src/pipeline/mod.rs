//! Experiment orchestration: cohort generation, fold splitting, the
//! training loop with early stopping, per-plane prediction, fusion
//! fitting, and report writing.

pub mod dataset;
pub mod experiment;
pub mod folds;
pub mod probio;
pub mod train;

pub use dataset::{
    load_subject, load_dataset, make_phantom_cohort, DatasetManifest, SubjectEntry,
};
pub use experiment::{
    run_experiment, run_experiment_jobs, AggregateReport, ExperimentConfig, ExperimentReport,
};
pub use folds::{make_folds, FoldIds, FoldSplit};
pub use probio::{load_prob_volumes, save_prob_volumes, ProbManifest};
pub use train::{
    evaluate_subject, pick_batch_size, predict_subject, train_fold, EarlyStopper, EpochRow,
    SubjectData, SubjectStacks, TrainLog,
};
