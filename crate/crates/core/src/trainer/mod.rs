//! The training loop, optimizers and method variants.

mod ablate;
mod archive;
mod iteration;
mod optim;
mod run;
mod variant;

pub use ablate::{
    completed_report, run_grid, summarize, summary_csv, CellFailure, GridOutcome, MeanStd, SummaryRow, FAILURES_JSON,
    SUMMARY_CSV,
};
pub use iteration::{compute_iteration, diversity_targets, IterationGrads, IterationSettings};
pub use optim::{OptimFamily, OptimSpec, Optimizer};
pub use variant::MethodVariant;
pub use run::{
    apply_iteration, checkpoint_config, load_datasets, metrics_csv, run_experiment, run_with_trainer, train_iteration,
    EpochRecord, ExperimentReport, Trainer, CHECKPOINT_DIR, MANIFEST, METRICS_CSV, REPORT_JSON,
};
