//! Post-run diagnostics: training-loss histograms, the posterior-collapse
//! monitor, and the `c / sqrt(t)` fit of the meta-gradient norm.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::networks::{classifier_forward, label_embed, meta_forward};
use crate::objectives::per_sample_cross_entropy;

/// Plain and rectified per-sample losses binned on shared edges.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistogram {
    pub edges: Vec<f64>,
    pub original: Vec<usize>,
    pub rectified: Vec<usize>,
    pub original_losses: Vec<f64>,
    pub rectified_losses: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn bin_counts(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

impl LossHistogram {
    /// Bins span `[0, max loss]` over both columns.
    pub fn from_losses(original: Vec<f64>, rectified: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("histogram bins must be at least 1".into()));
        }
        if original.len() != rectified.len() {
            return Err(Error::Data("loss columns differ in length".into()));
        }
        let top = original
            .iter()
            .chain(&rectified)
            .copied()
            .fold(0.0_f64, f64::max);
        let top = if top > 0.0 { top } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
        Ok(Self {
            original: bin_counts(&original, &edges),
            rectified: bin_counts(&rectified, &edges),
            edges,
            original_losses: original,
            rectified_losses: rectified,
        })
    }

    pub fn median_original(&self) -> f64 {
        median(&self.original_losses)
    }

    pub fn median_rectified(&self) -> f64 {
        median(&self.rectified_losses)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,original,rectified\n");
        for i in 0..self.original.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.original[i],
                self.rectified[i]
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-sample plain CE and rectified CE (`v = mu`) on observed labels.
pub fn loss_histogram(theta: &ParamSet, phi: &ParamSet, set: &LabeledSet, bins: usize) -> Result<LossHistogram> {
    let batch = set.all();
    let (features, logits) = classifier_forward(&batch.x, &theta.detach())?;
    let q = meta_forward(&features, &label_embed(&batch.labels, set.num_classes)?, &phi.detach())?;
    let original = per_sample_cross_entropy(&logits, &batch.labels)?;
    let rectified = per_sample_cross_entropy(&logits.mul(&q.mu.sigmoid()?)?, &batch.labels)?;
    LossHistogram::from_losses(original, rectified, bins)
}

/// Summary of the mean posterior std-norm series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseReport {
    pub initial: f64,
    pub min: f64,
    pub final_value: f64,
    /// Least-squares slope per iteration.
    pub slope: f64,
    /// `final < 0.05 * initial`.
    pub collapsed: bool,
}

pub const COLLAPSE_RATIO: f64 = 0.05;

fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn collapse_report(sigma_norms: &[f64]) -> Result<CollapseReport> {
    let (&initial, &final_value) = match (sigma_norms.first(), sigma_norms.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InsufficientData("no sigma_norm entries".into())),
    };
    Ok(CollapseReport {
        initial,
        min: sigma_norms.iter().copied().fold(f64::INFINITY, f64::min),
        final_value,
        slope: ls_slope(sigma_norms),
        collapsed: final_value < COLLAPSE_RATIO * initial,
    })
}

/// Series shorter than this are rejected by [`convergence_fit`].
pub const MIN_FIT_POINTS: usize = 100;

/// `R_t = (1/t) sum_{s<=t} g_s` with 1-based `t`.
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceFit {
    pub c: f64,
    /// `||R - c / sqrt(t)|| / ||R||`.
    pub residual: f64,
}

/// Least-squares fit of the running average of `meta_grad_sq` to `c / sqrt(t)`.
pub fn convergence_fit(meta_grad_sq: &[f64]) -> Result<ConvergenceFit> {
    if meta_grad_sq.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData(format!(
            "convergence fit needs {MIN_FIT_POINTS} meta-gradient entries, got {}",
            meta_grad_sq.len()
        )));
    }
    let r = running_average(meta_grad_sq);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &rt) in r.iter().enumerate() {
        let t = (i + 1) as f64;
        num += rt / t.sqrt();
        den += 1.0 / t;
    }
    let c = num / den;
    let (mut err, mut norm) = (0.0, 0.0);
    for (i, &rt) in r.iter().enumerate() {
        let fit = c / ((i + 1) as f64).sqrt();
        err += (rt - fit).powi(2);
        norm += rt * rt;
    }
    let residual = if norm > 0.0 { (err / norm).sqrt() } else { 0.0 };
    Ok(ConvergenceFit { c, residual })
}

/// Means of consecutive windows of the running average over the final half,
/// each window a tenth of the series long.
pub fn final_half_windows(meta_grad_sq: &[f64]) -> Vec<f64> {
    let r = running_average(meta_grad_sq);
    let w = (r.len() / 10).max(1);
    r[r.len() / 2..]
        .chunks(w)
        .filter(|c| c.len() == w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect()
}

/// Whether [`final_half_windows`] never increases.
pub fn windowed_non_increasing(meta_grad_sq: &[f64]) -> bool {
    final_half_windows(meta_grad_sq).windows(2).all(|p| p[1] <= p[0])
}
