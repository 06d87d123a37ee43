//! Bi-level training: the virtual classifier step, meta and prior updates
//! through it, the real classifier step, and the loops around them.

mod metrics;
mod optim;
mod select;
mod step;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::networks::{ClassifierSpec, MetaNetSpec};
use crate::objectives::ObjectiveConfig;
use crate::rng::SeededRng;

pub use metrics::{MetricRow, RunMetrics, METRICS_HEADER};
pub use optim::{Adam, MetaOptimizer, MetaUpdater, Sgd};
pub use select::{
    per_sample_losses, select_smallest, select_with_balance, train_without_meta, NoMetaConfig, NoMetaOutcome,
};
pub use step::{
    classifier_step, erm_step, meta_gradients, meta_step, outer_step, prior_step, train_iteration, virtual_update,
    IterationStats, MetaGradients, Optimizers,
};
pub use train::{accuracy, evaluate, train, train_erm, BatchSampler, TrainOutcome};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Learning rate at 0-based `step` out of `total` steps.
    pub fn at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

fn default_alpha() -> f64 {
    0.02
}
fn default_eta() -> f64 {
    3e-4
}
fn default_n() -> usize {
    100
}
fn default_m() -> usize {
    100
}
fn default_epochs() -> usize {
    40
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Classifier step size, shared by the virtual and the real step.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Meta and prior network step size.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Iterations per epoch; `ceil(train size / n)` when unset.
    #[serde(default, rename = "T")]
    pub iterations_per_epoch: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer_meta: MetaOptimizer,
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(skip)]
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            eta: default_eta(),
            n: default_n(),
            m: default_m(),
            iterations_per_epoch: None,
            epochs: default_epochs(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_schedule: LrSchedule::default(),
            seed: 0,
            optimizer_meta: MetaOptimizer::default(),
            record_wall_clock: false,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name}: {v} must be > 0")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("eta", self.eta)?;
        for (name, v) in [("n", self.n), ("m", self.m), ("epochs", self.epochs)] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name}: must be at least 1")));
            }
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("train.T: must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum: {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay: {} must be >= 0", self.weight_decay)));
        }
        self.objective.validate()
    }

    pub fn iterations(&self, train_len: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| train_len.div_ceil(self.n).max(1))
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_feature_dim() -> usize {
    32
}
fn default_meta_hidden() -> usize {
    64
}

/// Network widths; input and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_meta_hidden")]
    pub meta_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            feature_dim: default_feature_dim(),
            meta_hidden: default_meta_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.meta_hidden == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("model: layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier(&self, input_dim: usize, num_classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes,
        }
    }
}

/// Classifier `theta`, meta-network `phi`, prior network `omega`.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub omega: ParamSet,
}

impl ModelState {
    pub fn init(model: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = SeededRng::with_stream(seed, 2);
        Self {
            theta: model.classifier(input_dim, num_classes).init(&mut rng),
            phi: MetaNetSpec::meta(model.feature_dim, num_classes, model.meta_hidden).init(&mut rng),
            omega: MetaNetSpec::prior(model.feature_dim, num_classes, model.meta_hidden).init(&mut rng),
        }
    }

    /// All parameters under `theta.`, `phi.` and `omega.` prefixes.
    pub fn merged(&self) -> ParamSet {
        let mut all = ParamSet::new();
        all.extend_prefixed("theta.", &self.theta);
        all.extend_prefixed("phi.", &self.phi);
        all.extend_prefixed("omega.", &self.omega);
        all
    }

    pub fn from_merged(all: &ParamSet) -> Result<Self> {
        let state = Self {
            theta: all.strip_prefix("theta."),
            phi: all.strip_prefix("phi."),
            omega: all.strip_prefix("omega."),
        };
        if state.theta.is_empty() {
            return Err(Error::Checkpoint("no classifier parameters".into()));
        }
        Ok(state)
    }
}
