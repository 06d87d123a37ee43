//! Experiment configuration, the run driver, and post-run diagnostics.

mod config;
mod diag;
mod run;

pub use config::{
    apply_override, Ablation, BlobsConfig, DataConfig, ExperimentConfig, ExperimentSection, NoiseConfig, Seeds,
    SEED_ENV,
};
pub use diag::{
    collapse_report, convergence_fit, final_half_windows, loss_histogram, median, running_average,
    windowed_non_increasing, CollapseReport, ConvergenceFit, LossHistogram, COLLAPSE_RATIO, MIN_FIT_POINTS,
};
pub use run::{
    evaluate_checkpoint, nometa_section, prepare_data, run_experiment, Mode, Prepared, RunSummary, CHECKPOINT_FILE,
    CONFIG_FILE, HISTOGRAM_FILE, METRICS_FILE, NOISE_MANIFEST_FILE, SPLITS_FILE, TRANSITION_FILE,
};
