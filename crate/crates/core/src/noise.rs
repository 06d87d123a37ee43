//! Label-noise synthesis (flip, uniform, instance-dependent, open-set) and
//! transition-matrix estimation from a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamSet};
use crate::data::{LabeledSet, NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::networks::{classifier_forward, label_embed, meta_forward};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Flip,
    Uniform,
    Instance,
    Openset,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Flip => "flip",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Instance => "instance",
            NoiseKind::Openset => "openset",
        }
    }
}

fn default_ood_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flip_targets: Option<Vec<usize>>,
    /// Share of classes treated as out-of-distribution (open-set only).
    #[serde(default = "default_ood_fraction")]
    pub ood_fraction: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, rho: f64, seed: u64) -> Self {
        Self {
            kind,
            rho,
            seed,
            flip_targets: None,
            ood_fraction: default_ood_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("noise.rho: {} not in [0, 1]", self.rho)));
        }
        if self.kind == NoiseKind::Openset && !(self.ood_fraction > 0.0 && self.ood_fraction < 1.0) {
            return Err(Error::Config(format!(
                "noise.ood_fraction: {} not in (0, 1)",
                self.ood_fraction
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `P(noisy = j | clean = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(classes: usize) -> Self {
        let mut data = vec![0.0; classes * classes];
        for i in 0..classes {
            data[i * classes + i] = 1.0;
        }
        Self { classes, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Data("transition matrix must be square".into()));
        }
        let m = Self {
            classes,
            data: rows.into_iter().flatten().collect(),
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        for i in 0..self.classes {
            let row = self.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("transition row {i} is not a distribution: {row:?}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn row_major(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        assert_eq!(self.classes, other.classes);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Empirical matrix from paired (row class, column class) observations.
    /// Rows without observations become uniform; their indices are returned.
    pub fn from_counts(classes: usize, pairs: impl Iterator<Item = (usize, usize)>) -> (Self, Vec<usize>) {
        let mut counts = vec![0usize; classes * classes];
        for (i, j) in pairs {
            counts[i * classes + j] += 1;
        }
        let mut data = vec![0.0; classes * classes];
        let mut empty = Vec::new();
        for i in 0..classes {
            let row = &counts[i * classes..(i + 1) * classes];
            let total: usize = row.iter().sum();
            if total == 0 {
                empty.push(i);
                data[i * classes..(i + 1) * classes].fill(1.0 / classes as f64);
            } else {
                for j in 0..classes {
                    data[i * classes + j] = row[j] as f64 / total as f64;
                }
            }
        }
        (Self { classes, data }, empty)
    }

    /// Expected fraction of corrupted labels under class frequencies `prior`.
    pub fn expected_corruption(&self, prior: &[f64]) -> f64 {
        prior
            .iter()
            .enumerate()
            .map(|(i, p)| p * (1.0 - self.get(i, i)))
            .sum()
    }
}

/// Outcome of a label corruption.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub labels: Vec<usize>,
    /// Analytic (flip, uniform, open-set) or per-sample expected (instance)
    /// transition matrix.
    pub transition: TransitionMatrix,
    pub flip_targets: Option<Vec<usize>>,
    pub flip_probabilities: Option<Vec<f64>>,
}

fn require_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Data(format!("noise needs at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&index) => Err(Error::ClassOutOfRange {
            index,
            classes: num_classes,
        }),
        None => Ok(()),
    }
}

/// Each class flips to one fixed, distinct target class with probability rho.
pub fn apply_flip_noise(labels: &[usize], num_classes: usize, spec: &NoiseSpec) -> Result<Corruption> {
    require_classes(num_classes)?;
    check_labels(labels, num_classes)?;
    let mut rng = SeededRng::new(spec.seed);
    let targets = match &spec.flip_targets {
        Some(t) => {
            if t.len() != num_classes || t.iter().enumerate().any(|(c, &d)| d == c || d >= num_classes) {
                return Err(Error::Config(format!(
                    "noise.flip_targets: {t:?} must map each of {num_classes} classes to a different class"
                )));
            }
            t.clone()
        }
        None => (0..num_classes)
            .map(|c| (c + 1 + rng.below(num_classes - 1)) % num_classes)
            .collect(),
    };
    let noisy = labels
        .iter()
        .map(|&y| if rng.bernoulli(spec.rho) { targets[y] } else { y })
        .collect();
    let mut rows = vec![vec![0.0; num_classes]; num_classes];
    for (c, row) in rows.iter_mut().enumerate() {
        row[c] = 1.0 - spec.rho;
        row[targets[c]] += spec.rho;
    }
    Ok(Corruption {
        labels: noisy,
        transition: TransitionMatrix::from_rows(rows)?,
        flip_targets: Some(targets),
        flip_probabilities: None,
    })
}

/// With probability rho, redraw the label uniformly over all classes (the
/// true class included).
pub fn apply_uniform_noise(labels: &[usize], num_classes: usize, spec: &NoiseSpec) -> Result<Corruption> {
    require_classes(num_classes)?;
    check_labels(labels, num_classes)?;
    let mut rng = SeededRng::new(spec.seed);
    let noisy = labels
        .iter()
        .map(|&y| {
            if rng.bernoulli(spec.rho) {
                rng.below(num_classes)
            } else {
                y
            }
        })
        .collect();
    let off = spec.rho / num_classes as f64;
    let rows = (0..num_classes)
        .map(|i| {
            (0..num_classes)
                .map(|j| if i == j { 1.0 - spec.rho + off } else { off })
                .collect()
        })
        .collect();
    Ok(Corruption {
        labels: noisy,
        transition: TransitionMatrix::from_rows(rows)?,
        flip_targets: None,
        flip_probabilities: None,
    })
}

/// Scale factor `k` with `mean(min(1, k * r)) == rho`.
fn calibrate_rates(raw: &[f64], rho: f64) -> Vec<f64> {
    if rho <= 0.0 || raw.is_empty() {
        return vec![0.0; raw.len()];
    }
    let positive = raw.iter().filter(|&&r| r > 0.0).count() as f64 / raw.len() as f64;
    if rho >= positive {
        return raw.iter().map(|&r| if r > 0.0 { 1.0 } else { 0.0 }).collect();
    }
    let mean_at = |k: f64| raw.iter().map(|&r| (k * r).min(1.0)).sum::<f64>() / raw.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_at(hi) < rho {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    raw.iter().map(|&r| (hi * r).min(1.0)).collect()
}

/// Instance-dependent noise by random projection.
///
/// Each class owns a fixed Gaussian projection `W_c` (dim x C). A sample of
/// class `y` scores `s = x W_y`; its raw flip propensity is the softmax mass
/// of `s` off the true class, rescaled so the mean flip rate is rho. A
/// flipped sample takes the highest-scoring other class. This is an
/// approximation of projection-based recipes, not a specific published one.
pub fn apply_instance_noise(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
    spec: &NoiseSpec,
) -> Result<Corruption> {
    require_classes(num_classes)?;
    check_labels(labels, num_classes)?;
    if features.len() != labels.len() * dim {
        return Err(Error::Data("feature matrix does not match label count".into()));
    }
    let mut rng = SeededRng::new(spec.seed);
    let projections: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim * num_classes).map(|_| rng.normal()).collect())
        .collect();
    let mut raw = Vec::with_capacity(labels.len());
    let mut targets = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let x = &features[i * dim..(i + 1) * dim];
        let w = &projections[y];
        let scores: Vec<f64> = (0..num_classes)
            .map(|j| (0..dim).map(|k| x[k] * w[k * num_classes + j]).sum())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        raw.push(1.0 - (scores[y] - max).exp() / z);
        let target = (0..num_classes)
            .filter(|&j| j != y)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("at least two classes");
        targets.push(target);
    }
    let rates = calibrate_rates(&raw, spec.rho);
    let noisy: Vec<usize> = labels
        .iter()
        .zip(&rates)
        .zip(&targets)
        .map(|((&y, &q), &t)| if rng.bernoulli(q) { t } else { y })
        .collect();

    let mut rows = vec![vec![0.0; num_classes]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for ((&y, &q), &t) in labels.iter().zip(&rates).zip(&targets) {
        counts[y] += 1;
        rows[y][y] += 1.0 - q;
        rows[y][t] += q;
    }
    for (c, row) in rows.iter_mut().enumerate() {
        if counts[c] == 0 {
            row[c] = 1.0;
        } else {
            row.iter_mut().for_each(|p| *p /= counts[c] as f64);
        }
    }
    Ok(Corruption {
        labels: noisy,
        transition: TransitionMatrix::from_rows(rows)?,
        flip_targets: None,
        flip_probabilities: Some(rates),
    })
}

/// Number of trailing classes treated as out-of-distribution.
pub fn ood_class_count(num_classes: usize, fraction: f64) -> usize {
    (fraction * num_classes as f64 - 1e-9).ceil().max(1.0) as usize
}

/// Open-set corruption of the train rows of `dataset`.
///
/// Rows of the last `ceil(fraction * C)` classes are relabeled uniformly into
/// the remaining classes, then each in-distribution row moves to a uniformly
/// chosen *other* in-distribution class with probability rho, so the overall
/// corrupted share is `f + (1 - f) * rho` with `f` the OOD row share. The
/// returned dataset has the in-distribution class count.
pub fn apply_openset_noise(
    dataset: &NoisyDataset,
    rho: f64,
    ood_fraction: f64,
    seed: u64,
) -> Result<(NoisyDataset, Corruption)> {
    let c = dataset.num_classes();
    let ood = ood_class_count(c, ood_fraction);
    if !(ood_fraction > 0.0 && ood_fraction < 1.0) || c < ood + 2 {
        return Err(Error::Data(format!(
            "open-set noise needs at least 2 in-distribution classes; {c} classes with fraction {ood_fraction}"
        )));
    }
    let c_in = c - ood;
    let mut rng = SeededRng::new(seed);
    let mut labels = dataset.noisy_labels().to_vec();
    for (i, tag) in dataset.splits().iter().enumerate() {
        if *tag != Split::Train {
            continue;
        }
        let y = labels[i];
        labels[i] = if y >= c_in {
            rng.below(c_in)
        } else if c_in > 1 && rng.bernoulli(rho) {
            (y + 1 + rng.below(c_in - 1)) % c_in
        } else {
            y
        };
    }
    let rows = (0..c)
        .map(|i| {
            (0..c)
                .map(|j| match (i < c_in, j < c_in) {
                    (_, false) => 0.0,
                    (false, true) => 1.0 / c_in as f64,
                    (true, true) if i == j => 1.0 - rho,
                    (true, true) => rho / (c_in - 1) as f64,
                })
                .collect()
        })
        .collect();
    let transition = TransitionMatrix::from_rows(rows)?;
    let mut out = dataset.clone();
    out.set_noisy_labels(labels.clone());
    out.set_num_classes(c_in);
    out.transition = Some(transition.clone());
    Ok((
        out,
        Corruption {
            labels,
            transition,
            flip_targets: None,
            flip_probabilities: None,
        },
    ))
}

/// Corrupt the observed labels of train rows; meta and test rows keep theirs.
pub fn corrupt(dataset: &NoisyDataset, spec: &NoiseSpec) -> Result<(NoisyDataset, Corruption)> {
    spec.validate()?;
    if spec.kind == NoiseKind::Openset {
        return apply_openset_noise(dataset, spec.rho, spec.ood_fraction, spec.seed);
    }
    let train = dataset.indices_of(Split::Train);
    let labels: Vec<usize> = train.iter().map(|&i| dataset.noisy_labels()[i]).collect();
    let c = dataset.num_classes();
    let corruption = match spec.kind {
        NoiseKind::Flip => apply_flip_noise(&labels, c, spec)?,
        NoiseKind::Uniform => apply_uniform_noise(&labels, c, spec)?,
        NoiseKind::Instance => {
            let mut features = Vec::with_capacity(train.len() * dataset.dim());
            for &i in &train {
                features.extend_from_slice(dataset.row(i));
            }
            apply_instance_noise(&features, dataset.dim(), &labels, c, spec)?
        }
        NoiseKind::Openset => unreachable!(),
    };
    let mut all = dataset.noisy_labels().to_vec();
    for (&row, &y) in train.iter().zip(&corruption.labels) {
        all[row] = y;
    }
    let mut out = dataset.clone();
    out.set_noisy_labels(all);
    out.transition = Some(corruption.transition.clone());
    Ok((out, corruption))
}

/// Transition matrix estimated with the rectified classifier: row `i` is the
/// distribution of observed labels among samples whose rectified logits
/// (with `v = mu` from the meta-network) pick class `i`. Returns the matrix
/// and the rows that had no samples (set uniform).
pub fn estimate_transition_matrix(
    theta: &ParamSet,
    phi: &ParamSet,
    observed: &LabeledSet,
) -> Result<(TransitionMatrix, Vec<usize>)> {
    let batch = observed.all();
    let c = observed.num_classes;
    let (features, logits) = classifier_forward(&batch.x, theta)?;
    let q = meta_forward(&features, &label_embed(&batch.labels, c)?, phi)?;
    let predicted: Vec<usize> = (0..batch.labels.len())
        .map(|i| {
            let z = &logits.data()[i * c..(i + 1) * c];
            let mu = &q.mu.data()[i * c..(i + 1) * c];
            argmax(z.iter().zip(mu).map(|(l, m)| sigmoid(*m) * l))
        })
        .collect();
    Ok(TransitionMatrix::from_counts(
        c,
        predicted.into_iter().zip(batch.labels.iter().copied()),
    ))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Key-value record written next to a corrupted dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseManifest {
    pub kind: NoiseKind,
    pub rho: f64,
    pub seed: u64,
    pub flip_targets: Option<Vec<usize>>,
    pub realized_corruption: f64,
    pub transition: TransitionMatrix,
}

impl NoiseManifest {
    pub fn new(spec: &NoiseSpec, corruption: &Corruption, realized_corruption: f64) -> Self {
        Self {
            kind: spec.kind,
            rho: spec.rho,
            seed: spec.seed,
            flip_targets: corruption.flip_targets.clone(),
            realized_corruption,
            transition: corruption.transition.clone(),
        }
    }

    fn join<T: ToString>(values: &[T]) -> String {
        values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind = {}", self.kind.as_str());
        let _ = writeln!(s, "rho = {:?}", self.rho);
        let _ = writeln!(s, "seed = {}", self.seed);
        let targets = self.flip_targets.as_deref().map(Self::join).unwrap_or_default();
        let _ = writeln!(s, "flip_targets = {targets}");
        let _ = writeln!(s, "realized_corruption = {:?}", self.realized_corruption);
        let _ = writeln!(s, "classes = {}", self.transition.classes());
        let values: Vec<String> = self.transition.row_major().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "transition = {}", values.join(","));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line without `=`: {line}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("manifest missing `{k}`")))
        };
        let bad = |k: &str| Error::Data(format!("manifest field `{k}` is malformed"));
        let kind = match get("kind")? {
            "flip" => NoiseKind::Flip,
            "uniform" => NoiseKind::Uniform,
            "instance" => NoiseKind::Instance,
            "openset" => NoiseKind::Openset,
            _ => return Err(bad("kind")),
        };
        let targets = get("flip_targets")?;
        let flip_targets = if targets.is_empty() {
            None
        } else {
            Some(
                targets
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| bad("flip_targets")))
                    .collect::<Result<Vec<usize>>>()?,
            )
        };
        let classes: usize = get("classes")?.parse().map_err(|_| bad("classes"))?;
        let values = get("transition")?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| bad("transition")))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != classes * classes {
            return Err(bad("transition"));
        }
        Ok(Self {
            kind,
            rho: get("rho")?.parse().map_err(|_| bad("rho"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            flip_targets,
            realized_corruption: get("realized_corruption")?.parse().map_err(|_| bad("realized_corruption"))?,
            transition: TransitionMatrix::from_rows(values.chunks(classes).map(<[f64]>::to_vec).collect())?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::make_blobs;
    use crate::networks::MetaNetSpec;

    fn labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    fn sigma3(n: f64, p: f64) -> f64 {
        3.0 * (p * (1.0 - p) / n).sqrt()
    }

    fn flipped(a: &[usize], b: &[usize]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
    }

    #[test]
    fn flip_extremes() {
        let y = labels(100, 4);
        let none = apply_flip_noise(&y, 4, &NoiseSpec::new(NoiseKind::Flip, 0.0, 1)).unwrap();
        assert_eq!(none.labels, y);
        assert_eq!(none.transition, TransitionMatrix::identity(4));
        let all = apply_flip_noise(&y, 4, &NoiseSpec::new(NoiseKind::Flip, 1.0, 1)).unwrap();
        let t = all.flip_targets.unwrap();
        assert!(t.iter().enumerate().all(|(c, &d)| c != d));
        assert!(y.iter().zip(&all.labels).all(|(&a, &b)| b == t[a]));
    }

    #[test]
    fn flip_rate_concentrates() {
        let y = labels(10_000, 5);
        let out = apply_flip_noise(&y, 5, &NoiseSpec::new(NoiseKind::Flip, 0.4, 3)).unwrap();
        assert!((flipped(&y, &out.labels) - 0.4).abs() <= sigma3(1e4, 0.4));
        for c in 0..5 {
            assert!((out.transition.get(c, c) - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn flip_rejects_bad_input() {
        let spec = NoiseSpec::new(NoiseKind::Flip, 0.2, 0);
        assert!(apply_flip_noise(&[0, 0], 1, &spec).is_err());
        let mut fixed = spec.clone();
        fixed.flip_targets = Some(vec![0, 1]);
        assert!(matches!(apply_flip_noise(&[0, 1], 2, &fixed), Err(Error::Config(_))));
        fixed.flip_targets = Some(vec![1, 0]);
        assert_eq!(apply_flip_noise(&[0, 1], 2, &fixed).unwrap().flip_targets, Some(vec![1, 0]));
    }

    #[test]
    fn uniform_zero_and_binary_full() {
        let y = labels(1000, 3);
        let none = apply_uniform_noise(&y, 3, &NoiseSpec::new(NoiseKind::Uniform, 0.0, 2)).unwrap();
        assert_eq!(none.labels, y);
        let y = labels(10_000, 2);
        let full = apply_uniform_noise(&y, 2, &NoiseSpec::new(NoiseKind::Uniform, 1.0, 2)).unwrap();
        let ones = full.labels.iter().filter(|&&l| l == 1).count() as f64 / 1e4;
        assert!((ones - 0.5).abs() <= sigma3(1e4, 0.5));
    }

    #[test]
    fn uniform_counts_match_matrix() {
        let n = 100_000;
        let c = 4;
        let y = labels(n, c);
        let out = apply_uniform_noise(&y, c, &NoiseSpec::new(NoiseKind::Uniform, 0.5, 11)).unwrap();
        let (realized, _) = TransitionMatrix::from_counts(c, y.iter().copied().zip(out.labels.iter().copied()));
        let per_class = (n / c) as f64;
        for i in 0..c {
            for j in 0..c {
                let p = out.transition.get(i, j);
                assert!((realized.get(i, j) - p).abs() <= sigma3(per_class, p), "({i},{j})");
            }
        }
        assert!((out.transition.get(0, 0) - (0.5 + 0.5 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn instance_noise_properties() {
        let ds = make_blobs(4, 2500, 8, 3.0, 5).unwrap();
        let y = ds.noisy_labels().to_vec();
        let spec = NoiseSpec::new(NoiseKind::Instance, 0.0, 4);
        let none = apply_instance_noise(ds.features(), 8, &y, 4, &spec).unwrap();
        assert_eq!(none.labels, y);
        let spec = NoiseSpec::new(NoiseKind::Instance, 0.3, 4);
        let a = apply_instance_noise(ds.features(), 8, &y, 4, &spec).unwrap();
        let b = apply_instance_noise(ds.features(), 8, &y, 4, &spec).unwrap();
        assert_eq!(a.labels, b.labels);
        let rates = a.flip_probabilities.unwrap();
        let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean_rate - 0.3).abs() < 1e-9);
        let var: f64 = rates.iter().map(|q| q * (1.0 - q)).sum::<f64>();
        let sigma = var.sqrt() / y.len() as f64;
        assert!((flipped(&y, &a.labels) - 0.3).abs() <= 3.0 * sigma);
        assert!(rates.iter().any(|&q| (q - mean_rate).abs() > 0.05), "rates should vary per sample");
    }

    #[test]
    fn openset_formula_and_classes() {
        let ds = make_blobs(10, 1000, 4, 3.0, 6).unwrap();
        let (zero, c0) = apply_openset_noise(&ds, 0.0, 0.2, 1).unwrap();
        assert_eq!(zero.num_classes(), 8);
        assert!((zero.corrupted_fraction() - 0.2).abs() < 1e-12);
        assert!(zero.noisy_labels().iter().all(|&y| y < 8));
        assert!((c0.transition.expected_corruption(&[0.1; 10]) - 0.2).abs() < 1e-12);
        let (half, c5) = apply_openset_noise(&ds, 0.5, 0.2, 1).unwrap();
        let expected = c5.transition.expected_corruption(&[0.1; 10]);
        assert!((expected - 0.6).abs() < 1e-12);
        assert!((half.corrupted_fraction() - 0.6).abs() <= 3.0 * (0.8 * 0.25 / 1e4f64).sqrt());
        assert!(apply_openset_noise(&make_blobs(2, 10, 2, 1.0, 0).unwrap(), 0.2, 0.2, 0).is_err());
    }

    #[test]
    fn corrupt_touches_only_train_rows() {
        let ds = crate::data::split_meta(make_blobs(3, 100, 3, 3.0, 0).unwrap(), 30, true, 1).unwrap();
        let before = ds.meta_set();
        let (noisy, _) = corrupt(&ds, &NoiseSpec::new(NoiseKind::Uniform, 0.8, 2)).unwrap();
        assert_eq!(noisy.meta_set(), before);
        assert!(noisy.corrupted_fraction() > 0.3);
    }

    #[test]
    fn estimate_identity_for_perfect_model() {
        // One-hot features; a hand-built classifier that reads them off.
        let c = 3;
        let n = 90;
        let y = labels(n, c);
        let mut feats = vec![0.0; n * c];
        for (i, &l) in y.iter().enumerate() {
            feats[i * c + l] = 1.0;
        }
        let set = LabeledSet {
            features: feats,
            dim: c,
            num_classes: c,
            labels: y,
        };
        let mut theta = ParamSet::new();
        let eye: Vec<f64> = (0..c * c).map(|k| if k % (c + 1) == 0 { 5.0 } else { 0.0 }).collect();
        theta.insert("l0.weight", Tensor::matrix(c, c, eye.clone()).unwrap());
        theta.insert("l0.bias", Tensor::zeros(&[c]));
        theta.insert("head.weight", Tensor::matrix(c, c, eye).unwrap());
        theta.insert("head.bias", Tensor::zeros(&[c]));
        let phi = MetaNetSpec::meta(c, c, 4).zeros();
        let (est, empty) = estimate_transition_matrix(&theta, &phi, &set).unwrap();
        assert!(empty.is_empty());
        assert!(est.max_abs_diff(&TransitionMatrix::identity(c)) < 1e-9);
        for i in 0..c {
            assert_eq!(est.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn empty_rows_become_uniform() {
        let (m, empty) = TransitionMatrix::from_counts(3, [(0, 0), (0, 1)].into_iter());
        assert_eq!(empty, vec![1, 2]);
        assert_eq!(m.row(1), &[1.0 / 3.0; 3]);
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn manifest_round_trip() {
        let y = labels(200, 4);
        let spec = NoiseSpec::new(NoiseKind::Flip, 0.25, 8);
        let out = apply_flip_noise(&y, 4, &spec).unwrap();
        let m = NoiseManifest::new(&spec, &out, flipped(&y, &out.labels));
        let text = m.to_text();
        assert!(text.contains("kind = flip"));
        assert_eq!(NoiseManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn rho_validated() {
        assert!(NoiseSpec::new(NoiseKind::Uniform, 1.5, 0).validate().is_err());
    }
}
