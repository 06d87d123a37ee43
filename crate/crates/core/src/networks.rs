//! Classifier, meta-network and prior network.
//!
//! The classifier is a tanh MLP whose last hidden layer is the feature
//! extractor; a linear head maps features to logits. The meta-network and
//! the prior network share one shape (one tanh hidden layer, linear output
//! of width `2C` split into mean and log-variance) and differ only in their
//! input: the meta-network also sees a one-hot label.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::distributions::FactorizedGaussian;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

pub const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ClassifierSpec {
    /// `(fan_in, fan_out)` of every layer; the last entry is the head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        let mut dims: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[0], w[1])).collect();
        dims.push((self.feature_dim, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    fn layer_names(&self) -> Vec<String> {
        let body = self.hidden_dims.len() + 1;
        (0..body).map(|i| format!("l{i}")).chain([HEAD.to_string()]).collect()
    }

    pub fn init(&self, rng: &mut SeededRng) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, (fan_in, fan_out)) in self.layer_names().into_iter().zip(self.layer_dims()) {
            init_dense(&mut ps, &name, fan_in, fan_out, rng);
        }
        ps
    }

    pub fn zeros(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, (fan_in, fan_out)) in self.layer_names().into_iter().zip(self.layer_dims()) {
            ps.insert(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
            ps.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        }
        ps
    }
}

/// Shared shape of the meta-network (`label_embed_dim = C`) and the prior
/// network (`label_embed_dim = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNetSpec {
    pub feature_dim: usize,
    pub label_embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl MetaNetSpec {
    pub fn meta(feature_dim: usize, num_classes: usize, hidden_dim: usize) -> Self {
        Self {
            feature_dim,
            label_embed_dim: num_classes,
            hidden_dim,
            num_classes,
        }
    }

    pub fn prior(feature_dim: usize, num_classes: usize, hidden_dim: usize) -> Self {
        Self {
            label_embed_dim: 0,
            ..Self::meta(feature_dim, num_classes, hidden_dim)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.label_embed_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_classes
    }

    pub fn param_count(&self) -> usize {
        (self.input_dim() + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.output_dim()
    }

    pub fn init(&self, rng: &mut SeededRng) -> ParamSet {
        let mut ps = ParamSet::new();
        init_dense(&mut ps, "hidden", self.input_dim(), self.hidden_dim, rng);
        init_dense(&mut ps, "out", self.hidden_dim, self.output_dim(), rng);
        ps
    }

    pub fn zeros(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("hidden.weight", Tensor::zeros(&[self.input_dim(), self.hidden_dim]));
        ps.insert("hidden.bias", Tensor::zeros(&[self.hidden_dim]));
        ps.insert("out.weight", Tensor::zeros(&[self.hidden_dim, self.output_dim()]));
        ps.insert("out.bias", Tensor::zeros(&[self.output_dim()]));
        ps
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
fn init_dense(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
        .collect();
    ps.insert(
        format!("{name}.weight"),
        Tensor::new(&[fan_in, fan_out], w).expect("length matches shape"),
    );
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

fn dense(x: &Tensor, params: &ParamSet, name: &str) -> Result<Tensor> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    let y = x.matmul(w)?;
    let shape = y.shape().to_vec();
    y.add(&b.broadcast_to(&shape)?)
}

fn expect_rank2(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape() {
        [rows, _] => Ok(*rows),
        other => Err(Error::shape(op, &[other])),
    }
}

/// `(features, logits)` for a `(batch, input_dim)` input.
pub fn classifier_forward(x: &Tensor, theta: &ParamSet) -> Result<(Tensor, Tensor)> {
    expect_rank2("classifier_forward", x)?;
    let mut h = x.clone();
    let mut layer = 0;
    while theta.contains(&format!("l{layer}.weight")) {
        h = dense(&h, theta, &format!("l{layer}"))?.tanh()?;
        layer += 1;
    }
    if layer == 0 {
        return Err(Error::MissingParam("l0.weight".into()));
    }
    let logits = dense(&h, theta, HEAD)?;
    Ok((h, logits))
}

/// Classifier parameter names that belong to the feature extractor.
pub fn feature_extractor_names(theta: &ParamSet) -> Vec<String> {
    theta
        .names()
        .filter(|n| !n.starts_with(HEAD))
        .map(str::to_string)
        .collect()
}

/// One-hot label embedding of width `num_classes`.
pub fn label_embed(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: y,
                classes: num_classes,
            });
        }
        data[row * num_classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

fn gaussian_head(input: &Tensor, params: &ParamSet) -> Result<FactorizedGaussian> {
    let h = dense(input, params, "hidden")?.tanh()?;
    let out = dense(&h, params, "out")?;
    let width = out.shape()[1];
    if width % 2 != 0 {
        return Err(Error::shape("gaussian_head", &[out.shape()]));
    }
    let c = width / 2;
    let mu = out.slice_last(0, c)?;
    let log_var = out.slice_last(c, width)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
    FactorizedGaussian::new(mu, log_var)
}

/// Posterior `q(v | x, y)` from features and embedded labels.
pub fn meta_forward(z: &Tensor, y_embed: &Tensor, phi: &ParamSet) -> Result<FactorizedGaussian> {
    let rows = expect_rank2("meta_forward", z)?;
    if expect_rank2("meta_forward", y_embed)? != rows {
        return Err(Error::shape("meta_forward", &[z.shape(), y_embed.shape()]));
    }
    gaussian_head(&Tensor::concat(&[z, y_embed])?, phi)
}

/// Label-free prior `p(v | x)` from features.
pub fn prior_forward(z: &Tensor, omega: &ParamSet) -> Result<FactorizedGaussian> {
    expect_rank2("prior_forward", z)?;
    gaussian_head(z, omega)
}
