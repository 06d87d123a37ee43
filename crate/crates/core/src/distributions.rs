//! Factorized Gaussians over the rectifying vector: reparameterized sampling
//! and the closed-form KL divergence.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone)]
pub struct FactorizedGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl FactorizedGaussian {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::shape("gaussian", &[mu.shape(), log_var.shape()]));
        }
        Ok(Self { mu, log_var })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    /// `exp(log_var / 2)`, recorded on the tape when the parameters are.
    pub fn std(&self) -> Result<Tensor> {
        self.log_var.scale(0.5)?.exp()
    }

    pub fn detach(&self) -> Self {
        Self {
            mu: self.mu.detach(),
            log_var: self.log_var.detach(),
        }
    }

    /// Mean over rows of the Euclidean norm of each row's standard deviation.
    pub fn mean_std_norm(&self) -> f64 {
        let shape = self.shape();
        let cols = shape.last().copied().unwrap_or(1).max(1);
        let rows = self.log_var.numel() / cols;
        if rows == 0 {
            return 0.0;
        }
        let total: f64 = self
            .log_var
            .data()
            .chunks(cols)
            .map(|row| row.iter().map(|lv| lv.exp()).sum::<f64>().sqrt())
            .sum();
        total / rows as f64
    }
}

/// I.i.d. standard normal draws of the given shape.
pub fn sample_standard_normal(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// `mu + std * eps` with fresh noise from `rng`. The noise is a constant, so
/// gradients flow only into `mu` and `log_var`.
pub fn reparameterize(g: &FactorizedGaussian, rng: &mut SeededRng) -> Result<Tensor> {
    let eps = sample_standard_normal(g.shape(), rng);
    reparameterize_with(g, &eps)
}

/// Reparameterized sample for a given noise tensor.
pub fn reparameterize_with(g: &FactorizedGaussian, eps: &Tensor) -> Result<Tensor> {
    g.mu.add(&g.std()?.mul(&eps.detach())?)
}

/// Elementwise KL terms `log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2`.
pub fn kl_elementwise(q: &FactorizedGaussian, p: &FactorizedGaussian) -> Result<Tensor> {
    if q.shape() != p.shape() {
        return Err(Error::shape("kl_divergence", &[q.shape(), p.shape()]));
    }
    let log_ratio = p.log_var.sub(&q.log_var)?.scale(0.5)?;
    let var_ratio = q.log_var.sub(&p.log_var)?.exp()?;
    let mean_term = q.mu.sub(&p.mu)?.square()?.mul(&p.log_var.neg()?.exp()?)?;
    log_ratio
        .add(&var_ratio.add(&mean_term)?.scale(0.5)?)?
        .add_scalar(-0.5)
}

/// `KL(q || p)` summed over every dimension.
pub fn kl_divergence(q: &FactorizedGaussian, p: &FactorizedGaussian) -> Result<Tensor> {
    kl_elementwise(q, p)?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_difference, relative_error};
    use crate::autodiff::{grad, Tape};
    use proptest::prelude::*;

    fn gaussian(mu: Vec<f64>, log_var: Vec<f64>) -> FactorizedGaussian {
        FactorizedGaussian::new(Tensor::vector(mu), Tensor::vector(log_var)).unwrap()
    }

    #[test]
    fn shape_mismatch_rejected() {
        let r = FactorizedGaussian::new(Tensor::zeros(&[2]), Tensor::zeros(&[3]));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn degenerate_variance_returns_mean() {
        let g = gaussian(vec![0.3, -1.2], vec![-50.0, -50.0]);
        let v = reparameterize(&g, &mut SeededRng::new(1)).unwrap();
        for (a, b) in v.data().iter().zip(g.mu.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_scale_passes_noise_through() {
        let g = gaussian(vec![0.0, 0.0], vec![0.0, 0.0]);
        let v = reparameterize_with(&g, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(v.data(), &[1.0, -1.0]);
    }

    #[test]
    fn sample_mean_concentrates() {
        let n = 1_000_000;
        let g = gaussian(vec![0.3; n], vec![0.0; n]);
        let v = reparameterize(&g, &mut SeededRng::new(2)).unwrap();
        let mean = v.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn standard_normal_moments_and_determinism() {
        let n = 1_000_000;
        let a = sample_standard_normal(&[n], &mut SeededRng::new(3));
        let b = sample_standard_normal(&[n], &mut SeededRng::new(3));
        assert_eq!(a.data(), b.data());
        let mean = a.data().iter().sum::<f64>() / n as f64;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let q = gaussian(vec![0.4, -2.0, 1.0], vec![0.3, -1.0, 2.0]);
        assert!(kl_divergence(&q, &q).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half_per_dim() {
        let q = gaussian(vec![1.0, 1.0], vec![0.0, 0.0]);
        let p = gaussian(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!((kl_divergence(&q, &p).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        for _ in 0..10 {
            let params: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let kl = |p: &[f64], tape: Option<&Tape>| {
                let t = |s: &[f64]| {
                    let t = Tensor::vector(s.to_vec());
                    tape.map_or(t.clone(), |tp| tp.leaf(&t))
                };
                let (q, r) = (
                    gaussian_t(t(&p[0..3]), t(&p[3..6])),
                    gaussian_t(t(&p[6..9]), t(&p[9..12])),
                );
                (kl_divergence(&q, &r).unwrap(), [q.mu, q.log_var, r.mu, r.log_var])
            };
            let tape = Tape::new();
            let (out, leaves) = kl(&params, Some(&tape));
            let refs: Vec<&Tensor> = leaves.iter().collect();
            let g: Vec<f64> = grad(&out, &refs, false)
                .unwrap()
                .iter()
                .flat_map(|t| t.to_vec())
                .collect();
            let fd = finite_difference(|p| kl(p, None).0.item(), &params, 1e-5);
            assert!(relative_error(&g, &fd) < 1e-6);
        }
    }

    fn gaussian_t(mu: Tensor, lv: Tensor) -> FactorizedGaussian {
        FactorizedGaussian::new(mu, lv).unwrap()
    }

    #[test]
    fn reparameterization_gradient_is_analytic() {
        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::vector(vec![0.1, -0.7, 2.0]));
        let lv = tape.leaf(&Tensor::vector(vec![0.5, -1.5, 0.0]));
        let eps = Tensor::vector(vec![0.9, -0.4, 1.3]);
        let g = FactorizedGaussian::new(mu.clone(), lv.clone()).unwrap();
        let v = reparameterize_with(&g, &eps).unwrap().sum().unwrap();
        let grads = grad(&v, &[&mu, &lv], false).unwrap();
        assert!(grads[0].data().iter().all(|&d| (d - 1.0).abs() < 1e-10));
        for i in 0..3 {
            let sigma = (lv.data()[i] / 2.0).exp();
            assert!((grads[1].data()[i] - sigma * eps.data()[i] / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_std_norm_of_unit_rows() {
        let g = FactorizedGaussian::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])).unwrap();
        assert!((g.mean_std_norm() - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            m1 in prop::collection::vec(-5.0f64..5.0, 4),
            l1 in prop::collection::vec(-6.0f64..6.0, 4),
            m2 in prop::collection::vec(-5.0f64..5.0, 4),
            l2 in prop::collection::vec(-6.0f64..6.0, 4),
        ) {
            let kl = kl_divergence(&gaussian(m1, l1), &gaussian(m2, l2)).unwrap().item();
            prop_assert!(kl >= -1e-12);
        }
    }
}
