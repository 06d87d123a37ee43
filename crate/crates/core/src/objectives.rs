//! Rectified empirical loss, its variational objective, and the meta loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::data::Batch;
use crate::distributions::{kl_elementwise, reparameterize_with, sample_standard_normal};
use crate::error::{Error, Result};
use crate::networks::{classifier_forward, label_embed, meta_forward, prior_forward};
use crate::rng::SeededRng;

/// How the rectifying vector is drawn from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Reparameterized,
    /// `v = mu`, no noise (the non-Bayesian ablation).
    Mean,
}

fn default_k() -> usize {
    1
}

fn default_lambda() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub include_kl_in_actual_step: bool,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            lambda: default_lambda(),
            include_kl_in_actual_step: false,
            sampling: Sampling::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("objective.k: must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("objective.lambda: {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

fn one_hot_for(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    match logits.shape() {
        [rows, classes] if *rows == labels.len() => label_embed(labels, *classes),
        other => Err(Error::shape("cross_entropy", &[other, &[labels.len()]])),
    }
}

/// Mean softmax cross-entropy of `(batch, C)` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let onehot = one_hot_for(logits, labels)?;
    let n = labels.len().max(1) as f64;
    logits.log_softmax()?.mul(&onehot)?.sum()?.scale(-1.0 / n)
}

/// Per-row cross-entropy values (no graph).
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let onehot = one_hot_for(logits, labels)?;
    let picked = logits.detach().log_softmax()?.mul(&onehot)?.sum_last()?;
    Ok(picked.data().iter().map(|v| -v).collect())
}

/// Cross-entropy of `softmax(sigmoid(v) * logits)`; `v` is the raw sample.
pub fn rectified_cross_entropy(logits: &Tensor, v: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape() != v.shape() {
        return Err(Error::shape("rectified_cross_entropy", &[logits.shape(), v.shape()]));
    }
    cross_entropy(&logits.mul(&v.sigmoid()?)?, labels)
}

/// Scalar summaries of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Mean rectified cross-entropy over the k samples.
    pub rectified_ce: f64,
    /// Per-example KL averaged over the batch.
    pub mean_kl: f64,
    /// Mean over the batch of the posterior standard-deviation norm.
    pub sigma_norm: f64,
}

/// Standard-normal draws for every sample index, in the order the objective
/// consumes them.
pub fn draw_noise(shape: &[usize], cfg: &ObjectiveConfig, rng: &mut SeededRng) -> Vec<Tensor> {
    match cfg.sampling {
        Sampling::Mean => Vec::new(),
        Sampling::Reparameterized => (0..cfg.k).map(|_| sample_standard_normal(shape, rng)).collect(),
    }
}

/// Variational objective with explicit noise. `include_kl` toggles the
/// `lambda * KL` term; the KL is reported in the diagnostics either way.
pub fn objective_with_noise(
    batch: &Batch,
    theta: &ParamSet,
    phi: &ParamSet,
    omega: &ParamSet,
    cfg: &ObjectiveConfig,
    eps: &[Tensor],
    include_kl: bool,
) -> Result<(Tensor, Diagnostics)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty training batch".into()));
    }
    let (features, logits) = classifier_forward(&batch.x, theta)?;
    let c = logits.shape()[1];
    let q = meta_forward(&features, &label_embed(&batch.labels, c)?, phi)?;
    let rows = batch.len() as f64;

    let ce = match cfg.sampling {
        Sampling::Mean => rectified_cross_entropy(&logits, &q.mu, &batch.labels)?,
        Sampling::Reparameterized => {
            if eps.len() != cfg.k {
                return Err(Error::Data(format!("{} noise draws for k = {}", eps.len(), cfg.k)));
            }
            let mut total: Option<Tensor> = None;
            for e in eps {
                let v = reparameterize_with(&q, e)?;
                let term = rectified_cross_entropy(&logits, &v, &batch.labels)?;
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(&term)?,
                });
            }
            total.expect("k >= 1").scale(1.0 / cfg.k as f64)?
        }
    };

    let p = prior_forward(&features, omega)?;
    let kl = kl_elementwise(&q, &p)?.sum()?.scale(1.0 / rows)?;
    let diagnostics = Diagnostics {
        rectified_ce: ce.item(),
        mean_kl: kl.item(),
        sigma_norm: q.mean_std_norm(),
    };
    let loss = if include_kl && cfg.lambda > 0.0 {
        ce.add(&kl.scale(cfg.lambda)?)?
    } else {
        ce
    };
    if !loss.item().is_finite() {
        return Err(Error::Numerical(format!("empirical objective is {}", loss.item())));
    }
    Ok((loss, diagnostics))
}

/// `(1/k) sum_j CE(sigmoid(v_j) * logits) + lambda * mean KL(q || p)` with
/// fresh draws from `rng`.
pub fn empirical_objective(
    batch: &Batch,
    theta: &ParamSet,
    phi: &ParamSet,
    omega: &ParamSet,
    cfg: &ObjectiveConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, Diagnostics)> {
    let c = head_classes(theta)?;
    let eps = draw_noise(&[batch.len(), c], cfg, rng);
    objective_with_noise(batch, theta, phi, omega, cfg, &eps, true)
}

/// Loss for the real classifier step: the KL term only when configured.
pub fn actual_step_objective(
    batch: &Batch,
    theta: &ParamSet,
    phi: &ParamSet,
    omega: &ParamSet,
    cfg: &ObjectiveConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, Diagnostics)> {
    let c = head_classes(theta)?;
    let eps = draw_noise(&[batch.len(), c], cfg, rng);
    objective_with_noise(batch, theta, phi, omega, cfg, &eps, cfg.include_kl_in_actual_step)
}

fn head_classes(theta: &ParamSet) -> Result<usize> {
    let w = theta.get("head.weight")?;
    Ok(w.shape()[1])
}

/// Plain cross-entropy of the classifier under `theta_hat` on clean data.
pub fn meta_objective(meta_batch: &Batch, theta_hat: &ParamSet) -> Result<Tensor> {
    if meta_batch.is_empty() {
        return Err(Error::InsufficientData("empty meta batch".into()));
    }
    let (_, logits) = classifier_forward(&meta_batch.x, theta_hat)?;
    let loss = cross_entropy(&logits, &meta_batch.labels)?;
    if !loss.item().is_finite() {
        return Err(Error::Numerical(format!("meta objective is {}", loss.item())));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ClassifierSpec, MetaNetSpec};

    fn labels_batch(rows: usize, dim: usize, c: usize, rng: &mut SeededRng) -> Batch {
        let x: Vec<f64> = (0..rows * dim).map(|_| rng.normal()).collect();
        Batch {
            x: Tensor::matrix(rows, dim, x).unwrap(),
            labels: (0..rows).map(|i| i % c).collect(),
        }
    }

    struct Fixture {
        batch: Batch,
        theta: ParamSet,
        phi: ParamSet,
        omega: ParamSet,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SeededRng::new(seed);
        let spec = ClassifierSpec {
            input_dim: 4,
            hidden_dims: vec![],
            feature_dim: 5,
            num_classes: 3,
        };
        Fixture {
            batch: labels_batch(6, 4, 3, &mut rng),
            theta: spec.init(&mut rng),
            phi: MetaNetSpec::meta(5, 3, 4).init(&mut rng),
            omega: MetaNetSpec::prior(5, 3, 4).init(&mut rng),
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[3, 4]);
        let v = Tensor::vector((0..12).map(|i| i as f64 - 6.0).collect());
        let v = Tensor::new(&[3, 4], v.to_vec()).unwrap();
        let loss = rectified_cross_entropy(&logits, &v, &[0, 1, 3]).unwrap().item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_v_recovers_plain_ce() {
        let logits = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let rect = rectified_cross_entropy(&logits, &Tensor::full(&[2, 3], 50.0), &[2, 0]).unwrap();
        let plain = cross_entropy(&logits, &[2, 0]).unwrap();
        assert!((rect.item() - plain.item()).abs() < 1e-8);
    }

    #[test]
    fn hand_evaluated_two_class_case() {
        let logits = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let loss = rectified_cross_entropy(&logits, &Tensor::zeros(&[1, 2]), &[0]).unwrap().item();
        let e = std::f64::consts::E;
        assert!((loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn errors_on_bad_input() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            rectified_cross_entropy(&logits, &Tensor::zeros(&[2, 2]), &[0, 1]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::ClassOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn degenerate_sampling_equals_mean_rectification() {
        let f = fixture(1);
        let mut phi = f.phi.clone();
        // Drive log-variance to its floor by a large negative output bias.
        let b = phi.get("out.bias").unwrap().to_vec();
        let b: Vec<f64> = b.iter().enumerate().map(|(i, &x)| if i >= 3 { -50.0 } else { x }).collect();
        phi.insert("out.bias", Tensor::vector(b));
        let cfg = ObjectiveConfig {
            k: 1,
            lambda: 0.0,
            ..Default::default()
        };
        let (loss, _) = empirical_objective(&f.batch, &f.theta, &phi, &f.omega, &cfg, &mut SeededRng::new(3)).unwrap();
        let mean_cfg = ObjectiveConfig {
            sampling: Sampling::Mean,
            ..cfg
        };
        let (mean_loss, _) =
            empirical_objective(&f.batch, &f.theta, &phi, &f.omega, &mean_cfg, &mut SeededRng::new(3)).unwrap();
        // log-variance is clamped at -10, so sigma = exp(-5) remains.
        assert!((loss.item() - mean_loss.item()).abs() < 1e-2);
        let eps: Vec<Tensor> = vec![Tensor::zeros(&[6, 3])];
        let (zero_noise, _) = objective_with_noise(&f.batch, &f.theta, &phi, &f.omega, &cfg, &eps, true).unwrap();
        assert!((zero_noise.item() - mean_loss.item()).abs() < 1e-8);
    }

    #[test]
    fn lambda_enters_linearly() {
        let f = fixture(2);
        let run = |lambda: f64| {
            let cfg = ObjectiveConfig {
                lambda,
                ..Default::default()
            };
            empirical_objective(&f.batch, &f.theta, &f.phi, &f.omega, &cfg, &mut SeededRng::new(9)).unwrap()
        };
        let (l0, d0) = run(0.0);
        let (l1, d1) = run(1e-3);
        assert_eq!(d0, d1);
        assert!((l1.item() - l0.item() - 1e-3 * d0.mean_kl).abs() < 1e-15);
    }

    #[test]
    fn k_samples_average_single_sample_losses() {
        let f = fixture(4);
        let cfg = ObjectiveConfig {
            k: 4,
            lambda: 0.0,
            ..Default::default()
        };
        let mut rng = SeededRng::new(5);
        let eps = draw_noise(&[6, 3], &cfg, &mut rng);
        let (joint, _) = objective_with_noise(&f.batch, &f.theta, &f.phi, &f.omega, &cfg, &eps, true).unwrap();
        let single = ObjectiveConfig { k: 1, ..cfg.clone() };
        let mean: f64 = eps
            .iter()
            .map(|e| {
                objective_with_noise(&f.batch, &f.theta, &f.phi, &f.omega, &single, std::slice::from_ref(e), true)
                    .unwrap()
                    .0
                    .item()
            })
            .sum::<f64>()
            / 4.0;
        assert!((joint.item() - mean).abs() < 1e-12);
        let (again, _) = empirical_objective(&f.batch, &f.theta, &f.phi, &f.omega, &cfg, &mut SeededRng::new(5)).unwrap();
        assert_eq!(again.item(), joint.item());
    }

    #[test]
    fn elbo_two_term_structure() {
        // Recompute log-likelihood and KL by hand, per example.
        let f = fixture(6);
        let cfg = ObjectiveConfig {
            k: 3,
            lambda: 1.0,
            ..Default::default()
        };
        let eps = draw_noise(&[6, 3], &cfg, &mut SeededRng::new(7));
        let (loss, _) = objective_with_noise(&f.batch, &f.theta, &f.phi, &f.omega, &cfg, &eps, true).unwrap();

        let (z, logits) = classifier_forward(&f.batch.x, &f.theta).unwrap();
        let q = meta_forward(&z, &label_embed(&f.batch.labels, 3).unwrap(), &f.phi).unwrap();
        let p = prior_forward(&z, &f.omega).unwrap();
        let (lg, qm, ql, pm, pl) = (logits.data(), q.mu.data(), q.log_var.data(), p.mu.data(), p.log_var.data());
        let mut elbo = 0.0;
        for i in 0..6 {
            let y = f.batch.labels[i];
            let mut loglik = 0.0;
            for e in &eps {
                let r: Vec<f64> = (0..3)
                    .map(|j| {
                        let v = qm[i * 3 + j] + (ql[i * 3 + j] / 2.0).exp() * e.data()[i * 3 + j];
                        lg[i * 3 + j] / (1.0 + (-v).exp())
                    })
                    .collect();
                let lse = r.iter().map(|a| a.exp()).sum::<f64>().ln();
                loglik += (r[y] - lse) / eps.len() as f64;
            }
            let kl: f64 = (0..3)
                .map(|j| {
                    let k = i * 3 + j;
                    0.5 * (pl[k] - ql[k]) + 0.5 * ((ql[k] - pl[k]).exp() + (qm[k] - pm[k]).powi(2) / pl[k].exp()) - 0.5
                })
                .sum();
            elbo += (loglik - kl) / 6.0;
        }
        assert!((-loss.item() - elbo).abs() < 1e-12);
    }

    #[test]
    fn meta_objective_cases() {
        let f = fixture(8);
        let (_, logits) = classifier_forward(&f.batch.x, &f.theta).unwrap();
        let ce = cross_entropy(&logits, &f.batch.labels).unwrap();
        assert_eq!(meta_objective(&f.batch, &f.theta).unwrap().item(), ce.item());

        let mut theta = ParamSet::new();
        theta.insert("l0.weight", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        theta.insert("l0.bias", Tensor::zeros(&[2]));
        theta.insert("head.weight", Tensor::matrix(2, 2, vec![50.0, 0.0, 0.0, 50.0]).unwrap());
        theta.insert("head.bias", Tensor::zeros(&[2]));
        let batch = Batch {
            x: Tensor::matrix(2, 2, vec![30.0, 0.0, 0.0, 30.0]).unwrap(),
            labels: vec![0, 1],
        };
        assert!(meta_objective(&batch, &theta).unwrap().item() < 1e-10);
    }

    #[test]
    fn per_sample_ce_matches_mean() {
        let logits = Tensor::matrix(2, 3, vec![0.2, 1.0, -0.5, 2.0, 0.1, 0.0]).unwrap();
        let per = per_sample_cross_entropy(&logits, &[1, 2]).unwrap();
        let mean = cross_entropy(&logits, &[1, 2]).unwrap().item();
        assert!(((per[0] + per[1]) / 2.0 - mean).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
