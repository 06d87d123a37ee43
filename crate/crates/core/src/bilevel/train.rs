//! Training loops with meta-data (bi-level) and without a meta-network (ERM).

use std::time::Instant;

use crate::autodiff::{ParamSet, Tensor};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::networks::classifier_forward;
use crate::noise::argmax;
use crate::rng::SeededRng;

use super::metrics::{MetricRow, RunMetrics};
use super::step::{erm_step, train_iteration, IterationStats, Optimizers};
use super::{ModelConfig, ModelState, TrainConfig};

/// Minibatch row indices drawn without replacement; reshuffles when fewer
/// than a full batch remain.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(len: usize, size: usize, mut rng: SeededRng) -> Self {
        let order = rng.permutation(len);
        Self {
            size: size.min(len),
            order,
            pos: 0,
            rng,
        }
    }

    pub fn next_rows(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        rows
    }
}

/// Fraction of rows whose logit argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape().last().copied().unwrap_or(1);
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.data()[i * c..(i + 1) * c].iter().copied()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Classifier accuracy on a labeled set.
pub fn evaluate(theta: &ParamSet, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let batch = set.all();
    let (_, logits) = classifier_forward(&batch.x, &theta.detach())?;
    Ok(accuracy(&logits, &batch.labels))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub state: ModelState,
}

/// Shared iteration bookkeeping for every training loop.
pub(crate) struct Runner<'a> {
    pub cfg: &'a TrainConfig,
    pub state: ModelState,
    pub opts: Optimizers,
    pub noise_rng: SeededRng,
    pub train_sampler: BatchSampler,
    pub iterations_per_epoch: usize,
    pub iteration: usize,
    pub total: usize,
    pub metrics: RunMetrics,
    start: Option<Instant>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a TrainConfig, model: &ModelConfig, train: &LabeledSet, test: &LabeledSet) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if train.is_empty() {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        if test.dim != train.dim || test.num_classes != train.num_classes {
            return Err(Error::Data("train and test sets disagree on shape".into()));
        }
        let iterations_per_epoch = cfg.iterations(train.len());
        Ok(Self {
            cfg,
            state: ModelState::init(model, train.dim, train.num_classes, cfg.seed),
            opts: Optimizers::new(cfg),
            noise_rng: SeededRng::with_stream(cfg.seed, 1),
            train_sampler: BatchSampler::new(train.len(), cfg.n, SeededRng::with_stream(cfg.seed, 0)),
            iterations_per_epoch,
            iteration: 0,
            total: iterations_per_epoch * cfg.epochs,
            metrics: RunMetrics::default(),
            start: cfg.record_wall_clock.then(Instant::now),
        })
    }

    fn lr(&self) -> f64 {
        self.cfg.lr_schedule.at(self.cfg.alpha, self.iteration, self.total)
    }

    fn record(&mut self, epoch: usize, stats: Option<IterationStats>, emp_loss: f64, last: bool, test: &LabeledSet) -> Result<()> {
        self.iteration += 1;
        let test_acc = if last { Some(evaluate(&self.state.theta, test)?) } else { None };
        self.metrics.push(MetricRow {
            iteration: self.iteration,
            epoch,
            emp_loss: Some(emp_loss),
            meta_loss: stats.map(|s| s.meta_loss),
            mean_kl: stats.map(|s| s.mean_kl),
            sigma_norm: stats.map(|s| s.sigma_norm),
            meta_grad_sq: stats.map(|s| s.meta_grad_sq),
            test_acc,
            wall_ms: self.start.map(|t| t.elapsed().as_secs_f64() * 1e3),
        });
        Ok(())
    }

    pub fn vri_epoch(
        &mut self,
        epoch: usize,
        train: &LabeledSet,
        meta: &LabeledSet,
        meta_sampler: &mut BatchSampler,
        test: &LabeledSet,
    ) -> Result<()> {
        for t in 0..self.iterations_per_epoch {
            let batch = train.batch(&self.train_sampler.next_rows());
            let meta_batch = meta.batch(&meta_sampler.next_rows());
            let lr = self.lr();
            let stats = train_iteration(
                &mut self.state,
                &batch,
                &meta_batch,
                self.cfg,
                &mut self.opts,
                lr,
                &mut self.noise_rng,
            )?;
            self.record(epoch, Some(stats), stats.emp_loss, t + 1 == self.iterations_per_epoch, test)?;
        }
        Ok(())
    }

    pub fn erm_epoch(&mut self, epoch: usize, train: &LabeledSet, test: &LabeledSet) -> Result<()> {
        for t in 0..self.iterations_per_epoch {
            let batch = train.batch(&self.train_sampler.next_rows());
            let lr = self.lr();
            let (theta, loss) = erm_step(&self.state.theta, &batch, &mut self.opts.classifier, lr)?;
            self.state.theta = theta;
            self.record(epoch, None, loss, t + 1 == self.iterations_per_epoch, test)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            metrics: self.metrics,
            state: self.state,
        }
    }
}

fn check_meta(train: &LabeledSet, meta: &LabeledSet) -> Result<()> {
    if meta.dim != train.dim || meta.num_classes != train.num_classes {
        return Err(Error::Data("train and meta sets disagree on shape".into()));
    }
    if meta.is_empty() {
        return Err(Error::InsufficientData("empty meta set".into()));
    }
    Ok(())
}

/// Bi-level training with a clean meta set.
pub fn train(
    train: &LabeledSet,
    meta: &LabeledSet,
    test: &LabeledSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_meta(train, meta)?;
    let mut runner = Runner::new(cfg, model, train, test)?;
    let mut meta_sampler = BatchSampler::new(meta.len(), cfg.m, SeededRng::with_stream(cfg.seed, 3));
    for epoch in 0..cfg.epochs {
        runner.vri_epoch(epoch, train, meta, &mut meta_sampler, test)?;
    }
    Ok(runner.finish())
}

/// Plain cross-entropy baseline with the same classifier optimizer.
pub fn train_erm(train: &LabeledSet, test: &LabeledSet, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut runner = Runner::new(cfg, model, train, test)?;
    for epoch in 0..cfg.epochs {
        runner.erm_epoch(epoch, train, test)?;
    }
    Ok(runner.finish())
}
