//! Data preparation and the experiment driver that writes run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::ParamSet;
use crate::bilevel::{train, train_erm, train_without_meta, ModelState, NoMetaConfig, RunMetrics};
use crate::checkpoint;
use crate::data::{load_csv, make_blobs, read_split_manifest, split_meta, split_test, with_splits, NoisyDataset};
use crate::error::{Error, Result};
use crate::networks::MetaNetSpec;
use crate::noise::{corrupt, estimate_transition_matrix, NoiseManifest, TransitionMatrix};

use super::config::{Ablation, ExperimentConfig};
use super::diag::{collapse_report, convergence_fit, loss_histogram, CollapseReport, ConvergenceFit, LossHistogram};

pub const METRICS_FILE: &str = "metrics.csv";
pub const NOISE_MANIFEST_FILE: &str = "noise_manifest.txt";
pub const SPLITS_FILE: &str = "splits.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRANSITION_FILE: &str = "transition_estimate.csv";
pub const HISTOGRAM_FILE: &str = "loss_histogram.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Bi-level training against the clean meta split.
    Meta,
    /// Warm-up, then small-loss pseudo-meta selection.
    NoMeta,
}

/// Dataset with splits and corruption applied, plus the noise record.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: NoisyDataset,
    pub manifest: Option<NoiseManifest>,
}

/// Build, split and corrupt the configured dataset. Meta rows are tagged
/// before corruption. `NoMeta` skips the meta split.
pub fn prepare_data(cfg: &ExperimentConfig, mode: Mode) -> Result<Prepared> {
    let seeds = cfg.seeds();
    let d = &cfg.data;
    let mut ds = match (&d.blobs, &d.csv) {
        (Some(b), None) => make_blobs(b.classes, b.samples_per_class, b.dim, b.separation, seeds.data)?,
        (None, Some(path)) => load_csv(path)?,
        _ => return Err(Error::Config("data: set exactly one of `blobs` or `csv`".into())),
    };
    if let Some(path) = &d.split_manifest {
        ds = with_splits(ds, read_split_manifest(path)?)?;
    } else {
        if d.test_size > 0 {
            ds = split_test(ds, d.test_size, d.balanced, seeds.test_split)?;
        }
        if mode == Mode::Meta && d.meta_size > 0 {
            ds = split_meta(ds, d.meta_size, d.balanced, seeds.meta_split)?;
        }
    }
    let manifest = match cfg.noise_spec() {
        Some(spec) => {
            let (noisy, corruption) = corrupt(&ds, &spec)?;
            let realized = noisy.corrupted_fraction();
            ds = noisy;
            Some(NoiseManifest::new(&spec, &corruption, realized))
        }
        None => None,
    };
    Ok(Prepared { dataset: ds, manifest })
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub metrics: RunMetrics,
    pub state: ModelState,
    pub final_test_accuracy: Option<f64>,
    pub warmup_accuracy: Option<f64>,
    pub collapse: Option<CollapseReport>,
    pub convergence: Option<ConvergenceFit>,
    pub histogram: LossHistogram,
    pub transition_estimate: TransitionMatrix,
    pub transition_error: Option<f64>,
    pub realized_corruption: Option<f64>,
}

impl RunSummary {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "final_test_acc = {}", opt(self.final_test_accuracy));
        if self.warmup_accuracy.is_some() {
            let _ = writeln!(s, "warmup_test_acc = {}", opt(self.warmup_accuracy));
        }
        let _ = writeln!(s, "realized_corruption = {}", opt(self.realized_corruption));
        let _ = writeln!(s, "transition_max_abs_err = {}", opt(self.transition_error));
        let _ = writeln!(
            s,
            "median_loss original = {:.4} rectified = {:.4}",
            self.histogram.median_original(),
            self.histogram.median_rectified()
        );
        if let Some(c) = &self.collapse {
            let _ = writeln!(
                s,
                "sigma_norm initial = {:.4} min = {:.4} final = {:.4} slope = {:.3e} collapsed = {}",
                c.initial, c.min, c.final_value, c.slope, c.collapsed
            );
        }
        if let Some(f) = &self.convergence {
            let _ = writeln!(s, "meta_grad_fit c = {:.4e} residual = {:.4}", f.c, f.residual);
        }
        s
    }
}

fn transition_csv(estimate: &TransitionMatrix, truth: Option<&TransitionMatrix>, empty: &[usize]) -> String {
    let mut out = String::from("clean,noisy,estimated,true,empty_row\n");
    let c = estimate.classes();
    for i in 0..c {
        for j in 0..c {
            let t = truth.map(|m| m.get(i, j).to_string()).unwrap_or_default();
            let _ = writeln!(out, "{i},{j},{},{t},{}", estimate.get(i, j), u8::from(empty.contains(&i)));
        }
    }
    out
}

/// Train per the config and write every artifact into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.experiment.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Config(format!("experiment.output_dir: {}: {e}", out.display())))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;

    let prepared = prepare_data(cfg, mode)?;
    let ds = &prepared.dataset;
    ds.write_split_manifest(&out.join(SPLITS_FILE))?;
    if let Some(m) = &prepared.manifest {
        m.write(&out.join(NOISE_MANIFEST_FILE))?;
    }

    let train_cfg = cfg.resolved_train();
    let (train_set, test_set) = (ds.train_set(), ds.test_set());
    let ablation = cfg.experiment.ablation;
    let (outcome, warmup_accuracy) = match (ablation, mode) {
        (Ablation::Erm, _) => (train_erm(&train_set, &test_set, &cfg.model, &train_cfg)?, None),
        (_, Mode::Meta) => (train(&train_set, &ds.meta_set(), &test_set, &cfg.model, &train_cfg)?, None),
        (_, Mode::NoMeta) => {
            let r = train_without_meta(&train_set, &test_set, &cfg.model, &train_cfg, nometa_section(cfg)?)?;
            (r.outcome, r.warmup_accuracy)
        }
    };

    outcome.metrics.write_csv(&out.join(METRICS_FILE))?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.state.merged())?;

    // The ERM model has no trained meta-network; a zero one leaves the
    // logits' argmax and the loss ranking unchanged.
    let phi = if ablation == Ablation::Erm {
        zero_phi(cfg, ds.num_classes())
    } else {
        outcome.state.phi.clone()
    };
    let (estimate, empty) = estimate_transition_matrix(&outcome.state.theta, &phi, &train_set)?;
    let truth = prepared.manifest.as_ref().map(|m| &m.transition);
    fs::write(out.join(TRANSITION_FILE), transition_csv(&estimate, truth, &empty))?;
    let histogram = loss_histogram(&outcome.state.theta, &phi, &train_set, cfg.experiment.histogram_bins)?;
    histogram.write_csv(&out.join(HISTOGRAM_FILE))?;

    let sigma = outcome.metrics.sigma_norms();
    let grads = outcome.metrics.meta_grad_sq();
    Ok(RunSummary {
        output_dir: out,
        final_test_accuracy: outcome.metrics.final_test_accuracy(),
        warmup_accuracy,
        collapse: collapse_report(&sigma).ok(),
        convergence: convergence_fit(&grads).ok(),
        transition_error: truth.map(|t| estimate.max_abs_diff(t)),
        realized_corruption: prepared.manifest.as_ref().map(|m| m.realized_corruption),
        histogram,
        transition_estimate: estimate,
        metrics: outcome.metrics,
        state: outcome.state,
    })
}

fn zero_phi(cfg: &ExperimentConfig, num_classes: usize) -> ParamSet {
    MetaNetSpec::meta(cfg.model.feature_dim, num_classes, cfg.model.meta_hidden).zeros()
}

/// Test accuracy of the classifier stored in a checkpoint on the
/// configured test split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<f64> {
    let state = ModelState::from_merged(&checkpoint::load(path)?)?;
    let prepared = prepare_data(cfg, Mode::Meta)?;
    crate::bilevel::evaluate(&state.theta, &prepared.dataset.test_set())
}

/// Pseudo-meta configuration for `train-nometa`, or a config error.
pub fn nometa_section(cfg: &ExperimentConfig) -> Result<&NoMetaConfig> {
    cfg.nometa
        .as_ref()
        .ok_or_else(|| Error::Config("nometa: section required for train-nometa".into()))
}
