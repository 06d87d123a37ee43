//! Datasets: synthetic blobs, CSV ingestion and train/meta/test splitting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::noise::TransitionMatrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Meta,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Meta => "meta",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "meta" => Ok(Split::Meta),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Rows with observed (possibly corrupted) labels and the hidden clean
/// labels they were derived from.
///
/// Clean labels are only reachable through [`NoisyDataset::clean_labels`],
/// which counts its callers so tests can assert that training never looks.
#[derive(Debug)]
pub struct NoisyDataset {
    features: Vec<f64>,
    dim: usize,
    num_classes: usize,
    noisy_labels: Vec<usize>,
    clean_labels: Vec<usize>,
    split: Vec<Split>,
    pub transition: Option<TransitionMatrix>,
    clean_reads: AtomicUsize,
}

impl Clone for NoisyDataset {
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            dim: self.dim,
            num_classes: self.num_classes,
            noisy_labels: self.noisy_labels.clone(),
            clean_labels: self.clean_labels.clone(),
            split: self.split.clone(),
            transition: self.transition.clone(),
            clean_reads: AtomicUsize::new(0),
        }
    }
}

impl NoisyDataset {
    /// Clean dataset: every row tagged train, noisy labels equal to `labels`.
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::ClassOutOfRange {
                index: bad,
                classes: num_classes,
            });
        }
        let n = labels.len();
        Ok(Self {
            features,
            dim,
            num_classes,
            noisy_labels: labels.clone(),
            clean_labels: labels,
            split: vec![Split::Train; n],
            transition: None,
            clean_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    /// Ground-truth labels, for evaluation only.
    pub fn clean_labels(&self) -> &[usize] {
        self.clean_reads.fetch_add(1, Ordering::Relaxed);
        &self.clean_labels
    }

    pub fn clean_label_reads(&self) -> usize {
        self.clean_reads.load(Ordering::Relaxed)
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn indices_of(&self, tag: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Replace observed labels of every row (clean labels are untouched).
    pub(crate) fn set_noisy_labels(&mut self, labels: Vec<usize>) {
        debug_assert_eq!(labels.len(), self.len());
        self.noisy_labels = labels;
    }

    pub(crate) fn set_num_classes(&mut self, num_classes: usize) {
        self.num_classes = num_classes;
    }

    /// Fraction of train rows whose observed label differs from the clean one.
    pub fn corrupted_fraction(&self) -> f64 {
        let train = self.indices_of(Split::Train);
        if train.is_empty() {
            return 0.0;
        }
        let clean = self.clean_labels();
        let flipped = train.iter().filter(|&&i| self.noisy_labels[i] != clean[i]).count();
        flipped as f64 / train.len() as f64
    }

    /// Rows whose label falls outside the class range (open-set classes in
    /// meta and test rows) are dropped.
    fn view(&self, rows: &[usize], labels: &[usize]) -> LabeledSet {
        let rows: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] < self.num_classes).collect();
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &i in &rows {
            features.extend_from_slice(self.row(i));
        }
        LabeledSet {
            features,
            dim: self.dim,
            num_classes: self.num_classes,
            labels: rows.iter().map(|&i| labels[i]).collect(),
        }
    }

    /// Train rows with their observed labels.
    pub fn train_set(&self) -> LabeledSet {
        self.view(&self.indices_of(Split::Train), &self.noisy_labels)
    }

    /// Meta rows. They are tagged before corruption, so their observed
    /// labels are the clean ones.
    pub fn meta_set(&self) -> LabeledSet {
        self.view(&self.indices_of(Split::Meta), &self.noisy_labels)
    }

    /// Test rows with clean labels.
    pub fn test_set(&self) -> LabeledSet {
        let clean = self.clean_labels().to_vec();
        self.view(&self.indices_of(Split::Test), &clean)
    }

    /// Every row with its observed label.
    pub fn observed_set(&self) -> LabeledSet {
        let all: Vec<usize> = (0..self.len()).collect();
        self.view(&all, &self.noisy_labels)
    }

    pub fn write_split_manifest(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "tag"])?;
        for (i, s) in self.split.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training-facing rows: features and the labels a learner may see.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
}

/// A minibatch ready for the networks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        Batch {
            x: Tensor::matrix(rows.len(), self.dim, x).expect("row width matches"),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            x: Tensor::matrix(self.len(), self.dim, self.features.clone()).expect("row width matches"),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        let b = self.batch(rows);
        LabeledSet {
            features: b.x.to_vec(),
            dim: self.dim,
            num_classes: self.num_classes,
            labels: b.labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Vertices of a regular simplex with unit-free pairwise distance
/// `separation`, embedded in `dim` coordinates. When `dim < classes - 1` the
/// centers fall back to a regular polygon in the first two axes, adjacent
/// vertices `separation` apart.
pub fn simplex_centers(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if dim + 1 < classes {
        let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        return (0..classes)
            .map(|c| {
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                let mut v = vec![0.0; dim];
                v[0] = radius * a.cos();
                v[1] = radius * a.sin();
                v
            })
            .collect();
    }
    // Centered basis vectors e_i - 1/C, expressed in an orthonormal basis of
    // their (C-1)-dimensional span.
    let centered: Vec<Vec<f64>> = (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / classes as f64)
                .collect()
        })
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centered.iter().take(classes - 1) {
        let mut u = v.clone();
        for b in &basis {
            let dot: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in u.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(u.into_iter().map(|x| x / norm).collect());
    }
    let scale = separation / std::f64::consts::SQRT_2;
    centered
        .iter()
        .map(|v| {
            let mut out = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                out[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            out
        })
        .collect()
}

/// Unit-variance Gaussian clusters around simplex vertices. Rows are grouped
/// by class.
pub fn make_blobs(
    classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Data(format!(
            "blobs need at least 2 classes and 2 dims, got {classes} and {dim}"
        )));
    }
    let centers = simplex_centers(classes, dim, separation);
    let mut rng = SeededRng::new(seed);
    let mut features = Vec::with_capacity(classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            features.extend(center.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    NoisyDataset::new(features, dim, labels, classes)
}

/// Read `f0,...,f{d-1},label` rows. Clean labels start equal to the labels.
pub fn load_csv(path: &Path) -> Result<NoisyDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(parse_err(1, "header must be f0,...,f{d-1},label".into()));
    }
    for (i, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column `f{i}`, found `{name}`")));
        }
    }
    let dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} columns, found {}", record.len()),
            ));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{field}` is not a number")))?;
            features.push(v);
        }
        let raw = &record[dim];
        let y: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label `{raw}` is not a nonnegative integer")))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    NoisyDataset::new(features, dim, labels, classes)
}

/// Write rows with their observed labels in the [`load_csv`] format.
pub fn write_csv(path: &Path, dataset: &NoisyDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.noisy_labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Move `count` train rows to `tag`. When `balanced`, per-class quotas are
/// `count / C` with the remainder going to the lowest class indices.
fn split_off(
    mut dataset: NoisyDataset,
    tag: Split,
    count: usize,
    balanced: bool,
    seed: u64,
) -> Result<NoisyDataset> {
    let train = dataset.indices_of(Split::Train);
    if count >= train.len() {
        return Err(Error::Data(format!(
            "cannot take {count} {tag} rows from {} train rows",
            train.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let chosen: Vec<usize> = if balanced {
        let c = dataset.num_classes;
        let mut out = Vec::with_capacity(count);
        for class in 0..c {
            let quota = count / c + usize::from(class < count % c);
            let mut pool: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| dataset.noisy_labels[i] == class)
                .collect();
            if pool.len() < quota {
                return Err(Error::Data(format!(
                    "class {class} has {} rows, {quota} needed for a balanced {tag} split",
                    pool.len()
                )));
            }
            rng.shuffle(&mut pool);
            out.extend_from_slice(&pool[..quota]);
        }
        out
    } else {
        let mut pool = train;
        rng.shuffle(&mut pool);
        pool.truncate(count);
        pool
    };
    for i in chosen {
        dataset.split[i] = tag;
    }
    Ok(dataset)
}

/// Tag `m` clean rows as meta data. Must run before corruption.
pub fn split_meta(dataset: NoisyDataset, m: usize, balanced: bool, seed: u64) -> Result<NoisyDataset> {
    split_off(dataset, Split::Meta, m, balanced, seed)
}

/// Tag `n` rows as held-out test data (class-balanced when `balanced`).
pub fn split_test(dataset: NoisyDataset, n: usize, balanced: bool, seed: u64) -> Result<NoisyDataset> {
    split_off(dataset, Split::Test, n, balanced, seed)
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<Split>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut tags = Vec::new();
    for record in reader.records() {
        let record = record?;
        tags.push(record.get(1).unwrap_or("").parse()?);
    }
    Ok(tags)
}

/// Apply split tags read back from a manifest.
pub fn with_splits(mut dataset: NoisyDataset, tags: Vec<Split>) -> Result<NoisyDataset> {
    if tags.len() != dataset.len() {
        return Err(Error::Data(format!(
            "{} split tags for {} rows",
            tags.len(),
            dataset.len()
        )));
    }
    dataset.split = tags;
    Ok(dataset)
}
