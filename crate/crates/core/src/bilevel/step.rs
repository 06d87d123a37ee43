//! One bi-level iteration, split into its parts.

use crate::autodiff::{grad, ParamSet, Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::networks::classifier_forward;
use crate::objectives::{actual_step_objective, cross_entropy, empirical_objective, meta_objective, Diagnostics, ObjectiveConfig};
use crate::rng::SeededRng;

use super::optim::{MetaUpdater, Sgd};
use super::{ModelState, TrainConfig};

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub classifier: Sgd,
    pub phi: MetaUpdater,
    pub omega: MetaUpdater,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            classifier: Sgd::new(cfg.momentum, cfg.weight_decay),
            phi: MetaUpdater::new(cfg.optimizer_meta),
            omega: MetaUpdater::new(cfg.optimizer_meta),
        }
    }
}

/// `theta - alpha * grad_theta(objective)` kept on the tape so the result is
/// differentiable in `phi` and `omega`. `theta`, `phi` and `omega` must be
/// tape leaves (or expressions) on one tape.
pub fn virtual_update(
    theta: &ParamSet,
    batch: &Batch,
    phi: &ParamSet,
    omega: &ParamSet,
    cfg: &ObjectiveConfig,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<(ParamSet, Tensor, Diagnostics)> {
    let (loss, diagnostics) = empirical_objective(batch, theta, phi, omega, cfg, rng)?;
    let grads = grad(&loss, &theta.tensors(), true)?;
    let theta_hat = theta.zip_map(&grads, |_, p, g| p.sub(&g.scale(alpha)?))?;
    Ok((theta_hat, loss, diagnostics))
}

/// Meta-loss gradients for `phi` and `omega` from one backward pass.
#[derive(Debug, Clone)]
pub struct MetaGradients {
    pub phi: Vec<Tensor>,
    pub omega: Vec<Tensor>,
    pub meta_loss: f64,
}

impl MetaGradients {
    pub fn phi_sq_norm(&self) -> f64 {
        self.phi.iter().map(Tensor::norm_sq).sum()
    }
}

pub fn meta_gradients(
    theta_hat: &ParamSet,
    meta_batch: &Batch,
    phi: &ParamSet,
    omega: &ParamSet,
) -> Result<MetaGradients> {
    let loss = meta_objective(meta_batch, theta_hat)?;
    let mut wrt = phi.tensors();
    wrt.extend(omega.tensors());
    let mut grads = grad(&loss, &wrt, false)?;
    let omega_grads = grads.split_off(phi.len());
    let out = MetaGradients {
        phi: grads,
        omega: omega_grads,
        meta_loss: loss.item(),
    };
    if !out.phi_sq_norm().is_finite() {
        return Err(Error::Numerical("meta-gradient is not finite".into()));
    }
    Ok(out)
}

/// Apply the meta optimizer to `phi`.
pub fn meta_step(phi: &ParamSet, grads: &MetaGradients, opt: &mut MetaUpdater, eta: f64) -> Result<ParamSet> {
    opt.step(&phi.detach(), &grads.phi, eta)
}

/// Apply the meta optimizer to `omega`.
pub fn prior_step(omega: &ParamSet, grads: &MetaGradients, opt: &mut MetaUpdater, eta: f64) -> Result<ParamSet> {
    opt.step(&omega.detach(), &grads.omega, eta)
}

/// What one iteration observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub emp_loss: f64,
    pub meta_loss: f64,
    pub mean_kl: f64,
    pub sigma_norm: f64,
    pub meta_grad_sq: f64,
}

/// Virtual step from `state.theta`, then updated `(phi, omega)` and the
/// gradients that produced them. `state.theta` is not modified.
pub fn outer_step(
    state: &ModelState,
    batch: &Batch,
    meta_batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut Optimizers,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<(ParamSet, ParamSet, IterationStats)> {
    let tape = Tape::new();
    let theta = state.theta.attach(&tape);
    let phi = state.phi.attach(&tape);
    let omega = state.omega.attach(&tape);
    let (theta_hat, loss, diag) = virtual_update(&theta, batch, &phi, &omega, &cfg.objective, alpha, rng)?;
    let grads = meta_gradients(&theta_hat, meta_batch, &phi, &omega)?;
    let new_phi = meta_step(&phi, &grads, &mut opts.phi, cfg.eta)?;
    let new_omega = prior_step(&omega, &grads, &mut opts.omega, cfg.eta)?;
    Ok((
        new_phi,
        new_omega,
        IterationStats {
            emp_loss: loss.item(),
            meta_loss: grads.meta_loss,
            mean_kl: diag.mean_kl,
            sigma_norm: diag.sigma_norm,
            meta_grad_sq: grads.phi_sq_norm(),
        },
    ))
}

/// Real classifier update with the rectified loss under the given meta
/// parameters (treated as constants) and fresh noise.
#[allow(clippy::too_many_arguments)]
pub fn classifier_step(
    theta: &ParamSet,
    batch: &Batch,
    phi: &ParamSet,
    omega: &ParamSet,
    cfg: &ObjectiveConfig,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<(ParamSet, f64)> {
    let tape = Tape::new();
    let tracked = theta.attach(&tape);
    let (loss, _) = actual_step_objective(batch, &tracked, &phi.detach(), &omega.detach(), cfg, rng)?;
    let grads = grad(&loss, &tracked.tensors(), false)?;
    Ok((opt.step(theta, &grads, lr)?, loss.item()))
}

/// Plain cross-entropy classifier update.
pub fn erm_step(theta: &ParamSet, batch: &Batch, opt: &mut Sgd, lr: f64) -> Result<(ParamSet, f64)> {
    let tape = Tape::new();
    let tracked = theta.attach(&tape);
    let (_, logits) = classifier_forward(&batch.x, &tracked)?;
    let loss = cross_entropy(&logits, &batch.labels)?;
    if !loss.item().is_finite() {
        return Err(Error::Numerical(format!("training loss is {}", loss.item())));
    }
    let grads = grad(&loss, &tracked.tensors(), false)?;
    Ok((opt.step(theta, &grads, lr)?, loss.item()))
}

/// One full iteration on a single training batch: meta and prior updates
/// through the virtual step from the current classifier, then the real
/// classifier step using the freshly updated meta-network.
pub fn train_iteration(
    state: &mut ModelState,
    batch: &Batch,
    meta_batch: &Batch,
    cfg: &TrainConfig,
    opts: &mut Optimizers,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<IterationStats> {
    let (phi, omega, stats) = outer_step(state, batch, meta_batch, cfg, opts, lr, rng)?;
    state.phi = phi;
    state.omega = omega;
    let (theta, _) = classifier_step(
        &state.theta,
        batch,
        &state.phi,
        &state.omega,
        &cfg.objective,
        &mut opts.classifier,
        lr,
        rng,
    )?;
    state.theta = theta;
    Ok(stats)
}
