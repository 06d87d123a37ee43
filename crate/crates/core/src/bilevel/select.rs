//! Training without meta-data: warm up, then rebuild a pseudo-meta set from
//! small-loss samples each epoch.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::networks::classifier_forward;
use crate::objectives::per_sample_cross_entropy;
use crate::rng::SeededRng;

use super::train::{evaluate, BatchSampler, Runner, TrainOutcome};
use super::{ModelConfig, TrainConfig};

fn by_loss(losses: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b))
}

/// Class-balanced small-loss selection: the `M / C` smallest-loss samples of
/// every class, then any leftover slots from the smallest remaining losses,
/// one per class.
/// Ties go to the lower index. Returned indices are sorted.
pub fn select_with_balance(labels: &[usize], losses: &[f64], num_classes: usize, m: usize) -> Result<Vec<usize>> {
    if labels.len() != losses.len() {
        return Err(Error::Data("one loss per sample required".into()));
    }
    if m > labels.len() {
        return Err(Error::Config(format!("pseudo-meta size {m} exceeds {} samples", labels.len())));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class
            .get_mut(y)
            .ok_or(Error::ClassOutOfRange {
                index: y,
                classes: num_classes,
            })?
            .push(i);
    }
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientData(format!("class {c} has no samples to select")));
    }
    let quota = m / num_classes;
    let mut chosen = vec![false; labels.len()];
    for members in &mut per_class {
        members.sort_by(by_loss(losses));
        for &i in members.iter().take(quota) {
            chosen[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| !chosen[i]).collect();
    rest.sort_by(by_loss(losses));
    let mut left = m - chosen.iter().filter(|&&c| c).count();
    // At most one extra per class keeps class counts within one of each
    // other; a second pass only matters when some class ran out of samples.
    let mut extra = vec![false; num_classes];
    for &i in &rest {
        if left == 0 {
            break;
        }
        if !extra[labels[i]] {
            extra[labels[i]] = true;
            chosen[i] = true;
            left -= 1;
        }
    }
    for &i in &rest {
        if left == 0 {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            left -= 1;
        }
    }
    Ok((0..labels.len()).filter(|&i| chosen[i]).collect())
}

/// The `m` smallest losses regardless of class. Indices sorted.
pub fn select_smallest(losses: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(by_loss(losses));
    order.truncate(m);
    order.sort_unstable();
    order
}

/// Per-sample plain cross-entropy under `theta`.
pub fn per_sample_losses(theta: &ParamSet, set: &LabeledSet) -> Result<Vec<f64>> {
    let batch = set.all();
    let (_, logits) = classifier_forward(&batch.x, &theta.detach())?;
    per_sample_cross_entropy(&logits, &batch.labels)
}

fn default_balanced() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoMetaConfig {
    /// Plain cross-entropy epochs before selection starts, counted within
    /// the total epochs. Defaults to a tenth of them.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    /// Pseudo-meta set size.
    pub meta_size: usize,
    #[serde(default = "default_balanced")]
    pub balanced: bool,
}

impl NoMetaConfig {
    pub fn warmup(&self, epochs: usize) -> usize {
        self.warmup_epochs.unwrap_or((epochs / 10).max(1))
    }
}

#[derive(Debug, Clone)]
pub struct NoMetaOutcome {
    pub outcome: TrainOutcome,
    /// Test accuracy at the end of warm-up (`None` without warm-up).
    pub warmup_accuracy: Option<f64>,
    /// Pseudo-meta indices into the train set, one entry per selecting epoch.
    pub selections: Vec<Vec<usize>>,
}

/// Warm-up with cross-entropy, then per epoch: select a pseudo-meta set by
/// small loss and run bi-level iterations against it.
pub fn train_without_meta(
    train: &LabeledSet,
    test: &LabeledSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    nometa: &NoMetaConfig,
) -> Result<NoMetaOutcome> {
    let warmup = nometa.warmup(cfg.epochs);
    if warmup > cfg.epochs {
        return Err(Error::Config(format!(
            "nometa.warmup_epochs: {warmup} exceeds train.epochs {}",
            cfg.epochs
        )));
    }
    if nometa.meta_size == 0 || nometa.meta_size > train.len() {
        return Err(Error::Config(format!(
            "nometa.meta_size: {} must be in 1..={}",
            nometa.meta_size,
            train.len()
        )));
    }
    let mut runner = Runner::new(cfg, model, train, test)?;
    for epoch in 0..warmup {
        runner.erm_epoch(epoch, train, test)?;
    }
    let warmup_accuracy = if warmup > 0 {
        Some(evaluate(&runner.state.theta, test)?)
    } else {
        None
    };
    let mut selections = Vec::new();
    for epoch in warmup..cfg.epochs {
        let losses = per_sample_losses(&runner.state.theta, train)?;
        let picked = if nometa.balanced {
            select_with_balance(&train.labels, &losses, train.num_classes, nometa.meta_size)?
        } else {
            select_smallest(&losses, nometa.meta_size)
        };
        let meta = train.subset(&picked);
        let mut sampler = BatchSampler::new(meta.len(), cfg.m, SeededRng::with_stream(cfg.seed, 3 + epoch as u64));
        runner.vri_epoch(epoch, train, &meta, &mut sampler, test)?;
        selections.push(picked);
    }
    Ok(NoMetaOutcome {
        outcome: runner.finish(),
        warmup_accuracy,
        selections,
    })
}
