//! Browser demo bindings. Every export takes plain numbers and returns a JSON
//! string; `www/index.html` draws the results on canvases.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vri_core::autodiff::Tensor;
use vri_core::bilevel::{train, train_erm, ModelConfig, TrainConfig};
use vri_core::data::{make_blobs, split_meta, split_test};
use vri_core::distributions::{kl_divergence, reparameterize, FactorizedGaussian};
use vri_core::noise::{apply_flip_noise, apply_uniform_noise, corrupt, NoiseKind, NoiseSpec, TransitionMatrix};
use vri_core::objectives::ObjectiveConfig;
use vri_core::rng::SeededRng;
use vri_core::Result;

#[derive(Debug, Serialize)]
pub struct KlReport {
    pub closed_form: f64,
    pub monte_carlo: f64,
    /// Histogram of reparameterized draws from q over `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

fn gaussian(mu: f64, log_var: f64) -> Result<FactorizedGaussian> {
    FactorizedGaussian::new(Tensor::new(&[1], vec![mu])?, Tensor::new(&[1], vec![log_var])?)
}

fn log_density(x: f64, mu: f64, log_var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + (x - mu).powi(2) / log_var.exp())
}

/// Closed-form and sampled `KL(q || p)` for scalar Gaussians.
pub fn kl_report(mu_q: f64, log_var_q: f64, mu_p: f64, log_var_p: f64, samples: usize, seed: u64) -> Result<KlReport> {
    let (q, p) = (gaussian(mu_q, log_var_q)?, gaussian(mu_p, log_var_p)?);
    let closed_form = kl_divergence(&q, &p)?.item();
    let mut rng = SeededRng::new(seed);
    let draws: Vec<f64> = (0..samples.max(1))
        .map(|_| reparameterize(&q, &mut rng).map(|t| t.item()))
        .collect::<Result<_>>()?;
    let monte_carlo = draws
        .iter()
        .map(|&x| log_density(x, mu_q, log_var_q) - log_density(x, mu_p, log_var_p))
        .sum::<f64>()
        / draws.len() as f64;
    let sd = (0.5 * log_var_q).exp();
    let (lo, hi) = (mu_q - 4.0 * sd, mu_q + 4.0 * sd);
    let bins = 40;
    let mut counts = vec![0; bins];
    for &x in &draws {
        if x >= lo && x < hi {
            counts[((x - lo) / (hi - lo) * bins as f64) as usize] += 1;
        }
    }
    Ok(KlReport {
        closed_form,
        monte_carlo,
        lo,
        hi,
        counts,
    })
}

#[derive(Debug, Serialize)]
pub struct NoiseReport {
    pub classes: usize,
    /// Row-major analytic matrix.
    pub analytic: Vec<f64>,
    /// Row-major empirical `P(noisy | clean)` of the drawn labels.
    pub realized: Vec<f64>,
    pub flipped_fraction: f64,
}

/// Corrupt `per_class` labels of each class and compare realized counts to
/// the analytic transition matrix. `kind` is `flip` or `uniform`.
pub fn noise_report(kind: &str, rho: f64, classes: usize, per_class: usize, seed: u64) -> Result<NoiseReport> {
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let kind = match kind {
        "flip" => NoiseKind::Flip,
        "uniform" => NoiseKind::Uniform,
        other => return Err(vri_core::Error::Config(format!("noise kind `{other}`: use flip or uniform"))),
    };
    let spec = NoiseSpec::new(kind, rho, seed);
    spec.validate()?;
    let out = match kind {
        NoiseKind::Flip => apply_flip_noise(&labels, classes, &spec)?,
        _ => apply_uniform_noise(&labels, classes, &spec)?,
    };
    let (realized, _) = TransitionMatrix::from_counts(classes, labels.iter().copied().zip(out.labels.iter().copied()));
    let flipped = labels.iter().zip(&out.labels).filter(|(a, b)| a != b).count();
    Ok(NoiseReport {
        classes,
        analytic: out.transition.row_major().to_vec(),
        realized: realized.row_major().to_vec(),
        flipped_fraction: flipped as f64 / labels.len().max(1) as f64,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub test_acc: Vec<f64>,
    /// Per-epoch mean of the posterior std-norm (empty for ERM).
    pub sigma_norm: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct TrainDemo {
    pub vri: Curve,
    pub mc: Curve,
    pub erm: Curve,
}

fn curve(metrics: &vri_core::bilevel::RunMetrics) -> Curve {
    let mut sigma = Vec::new();
    let (mut sum, mut n) = (0.0, 0);
    for row in &metrics.rows {
        if let Some(s) = row.sigma_norm {
            sum += s;
            n += 1;
        }
        if row.test_acc.is_some() && n > 0 {
            sigma.push(sum / n as f64);
            sum = 0.0;
            n = 0;
        }
    }
    Curve {
        test_acc: metrics.test_accuracies(),
        sigma_norm: sigma,
    }
}

/// Small uniform-noise blob problem trained three ways: VRI, the
/// Monte-Carlo ablation without KL, and plain cross-entropy.
pub fn train_demo(rho: f64, epochs: usize, lambda: f64, seed: u64) -> Result<TrainDemo> {
    let ds = make_blobs(3, 120, 2, 3.0, seed)?;
    let ds = split_test(ds, 120, true, seed + 1)?;
    let ds = split_meta(ds, 15, true, seed + 2)?;
    let (ds, _) = corrupt(&ds, &NoiseSpec::new(NoiseKind::Uniform, rho, seed + 3))?;
    let (tr, meta, test) = (ds.train_set(), ds.meta_set(), ds.test_set());
    let model = ModelConfig {
        hidden_dims: vec![],
        feature_dim: 16,
        meta_hidden: 8,
    };
    let mut cfg = TrainConfig {
        alpha: 0.1,
        n: 25,
        m: 15,
        epochs: epochs.clamp(1, 200),
        seed,
        objective: ObjectiveConfig {
            lambda,
            ..Default::default()
        },
        ..Default::default()
    };
    let vri = train(&tr, &meta, &test, &model, &cfg)?;
    cfg.objective.lambda = 0.0;
    let mc = train(&tr, &meta, &test, &model, &cfg)?;
    let erm = train_erm(&tr, &test, &model, &cfg)?;
    Ok(TrainDemo {
        vri: curve(&vri.metrics),
        mc: curve(&mc.metrics),
        erm: curve(&erm.metrics),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let value = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn kl_explorer(mu_q: f64, log_var_q: f64, mu_p: f64, log_var_p: f64, samples: u32, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(kl_report(mu_q, log_var_q, mu_p, log_var_p, samples as usize, seed as u64))
}

#[wasm_bindgen]
pub fn noise_explorer(kind: &str, rho: f64, classes: u32, per_class: u32, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(noise_report(kind, rho, classes as usize, per_class as usize, seed as u64))
}

#[wasm_bindgen]
pub fn vri_vs_mc(rho: f64, epochs: u32, lambda: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(train_demo(rho, epochs as usize, lambda, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_matches_its_samples() {
        let r = kl_report(0.3, -0.4, -0.2, 0.5, 200_000, 1).unwrap();
        // Scalar Gaussian KL by hand.
        let (vq, vp) = ((-0.4f64).exp(), 0.5f64.exp());
        let expect = 0.5 * (vq / vp + (0.5f64).powi(2) / vp - 1.0 + (0.5 - -0.4));
        assert!((r.closed_form - expect).abs() < 1e-12);
        assert!((r.monte_carlo - expect).abs() < 1e-2);
        assert!(r.counts.iter().sum::<usize>() > 199_000);
    }

    #[test]
    fn same_distribution_has_zero_kl() {
        assert!(kl_report(1.0, 0.2, 1.0, 0.2, 10, 0).unwrap().closed_form.abs() < 1e-12);
    }

    #[test]
    fn noise_rows_are_stochastic() {
        let r = noise_report("uniform", 0.5, 4, 2000, 3).unwrap();
        for row in r.realized.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((r.analytic[0] - (0.5 + 0.5 / 4.0)).abs() < 1e-12);
        assert!((r.flipped_fraction - 0.375).abs() < 0.03);
        assert!(noise_report("instance", 0.5, 4, 10, 0).is_err());
        assert!(noise_report("flip", 1.5, 4, 10, 0).is_err());
    }

    #[test]
    fn demo_returns_one_point_per_epoch() {
        let d = train_demo(0.4, 3, 1e-3, 0).unwrap();
        assert_eq!(d.vri.test_acc.len(), 3);
        assert_eq!(d.mc.sigma_norm.len(), 3);
        assert!(d.erm.sigma_norm.is_empty());
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"vri\""));
    }
}
