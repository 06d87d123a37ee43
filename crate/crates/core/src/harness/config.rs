//! Experiment configuration: a TOML file with `[data]`, `[noise]`, `[train]`,
//! `[objective]`, `[model]`, `[nometa]` and `[experiment]` sections, plus
//! dotted `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{ModelConfig, NoMetaConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::objectives::{ObjectiveConfig, Sampling};

/// Environment variable that replaces `experiment.seed` when set.
pub const SEED_ENV: &str = "VRI_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Vri,
    /// Monte-Carlo rectification without the KL term.
    Mc,
    /// Plain cross-entropy, no meta-network.
    Erm,
    /// Deterministic `v = mu`, no KL term.
    NonBayesian,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Vri => "vri",
            Ablation::Mc => "mc",
            Ablation::Erm => "erm",
            Ablation::NonBayesian => "non_bayesian",
        }
    }

    /// The objective this ablation trains with.
    pub fn objective(&self, base: &ObjectiveConfig) -> ObjectiveConfig {
        let mut obj = base.clone();
        match self {
            Ablation::Vri | Ablation::Erm => {}
            Ablation::Mc => obj.lambda = 0.0,
            Ablation::NonBayesian => {
                obj.lambda = 0.0;
                obj.sampling = Sampling::Mean;
            }
        }
        obj
    }
}

fn default_separation() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_classes() -> usize {
    4
}
fn default_samples_per_class() -> usize {
    500
}
fn default_dim() -> usize {
    16
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            samples_per_class: default_samples_per_class(),
            dim: default_dim(),
            separation: default_separation(),
        }
    }
}

fn default_meta_size() -> usize {
    40
}
fn default_test_size() -> usize {
    400
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub blobs: Option<BlobsConfig>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_meta_size")]
    pub meta_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Class-balanced meta and test splits.
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Reuse split tags from an `index,tag` CSV instead of drawing them.
    #[serde(default)]
    pub split_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            blobs: Some(BlobsConfig::default()),
            csv: None,
            meta_size: default_meta_size(),
            test_size: default_test_size(),
            balanced: true,
            split_manifest: None,
        }
    }
}

fn default_ood() -> f64 {
    0.2
}

/// Noise section. `seed` defaults to an offset of the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub rho: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub flip_targets: Option<Vec<usize>>,
    #[serde(default = "default_ood")]
    pub ood_fraction: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Master seed; data, split, noise and training seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            ablation: Ablation::default(),
            output_dir: default_output_dir(),
            seed: 0,
            histogram_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub nometa: Option<NoMetaConfig>,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Seeds for each random stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub test_split: u64,
    pub meta_split: u64,
    pub noise: u64,
    pub train: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(table).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message().trim_end()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, apply `key=value` overrides, then `VRI_SEED`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = Self::from_table(table)?;
        cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.experiment.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: `{v}` is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.blobs, &self.data.csv) {
            (Some(_), Some(_)) => return Err(Error::Config("data: set exactly one of `blobs` or `csv`, not both".into())),
            (None, None) => return Err(Error::Config("data: one of `blobs` or `csv` is required".into())),
            _ => {}
        }
        if let Some(b) = &self.data.blobs {
            if b.classes < 2 || b.dim < 2 || b.samples_per_class == 0 {
                return Err(Error::Config(
                    "data.blobs: need classes >= 2, dim >= 2 and samples_per_class >= 1".into(),
                ));
            }
        }
        if self.experiment.histogram_bins == 0 {
            return Err(Error::Config("experiment.histogram_bins: must be at least 1".into()));
        }
        if let Some(n) = &self.noise {
            self.noise_spec_with(n, 0).validate()?;
        }
        self.train.validate()?;
        self.objective.validate()?;
        self.model.validate()
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.experiment.seed;
        Seeds {
            data: s,
            test_split: s.wrapping_add(1),
            meta_split: s.wrapping_add(2),
            noise: self.noise.as_ref().and_then(|n| n.seed).unwrap_or(s.wrapping_add(3)),
            train: s,
        }
    }

    fn noise_spec_with(&self, n: &NoiseConfig, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: n.kind,
            rho: n.rho,
            seed,
            flip_targets: n.flip_targets.clone(),
            ood_fraction: n.ood_fraction,
        }
    }

    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        let seed = self.seeds().noise;
        self.noise.as_ref().map(|n| self.noise_spec_with(n, seed))
    }

    /// Training config with the ablation's objective and the derived seed.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.objective = self.experiment.ablation.objective(&self.objective);
        t.seed = self.seeds().train;
        t
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set `{assignment}`: expected key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set `{assignment}`: empty key segment")));
    }
    let value: toml::Value = raw
        .parse()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (depth, p) in parents.iter().enumerate() {
        let entry = cur
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("--set `{assignment}`: `{}` is not a table", parts[..=depth].join(".")))
        })?;
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.data.blobs, Some(BlobsConfig::default()));
        assert_eq!(cfg.experiment.ablation, Ablation::Vri);
        assert_eq!(cfg.train.alpha, 0.02);
    }

    #[test]
    fn errors_name_the_field_path() {
        let err = ExperimentConfig::from_toml("[train]\nalpha = \"fast\"\n").unwrap_err();
        assert!(err.to_string().contains("train.alpha"), "{err}");
        let err = ExperimentConfig::from_toml("[model]\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        let err = ExperimentConfig::from_toml("[train]\nalpha = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("train.alpha"), "{err}");
    }

    #[test]
    fn exactly_one_data_source() {
        let both = "[data]\ncsv = \"x.csv\"\n[data.blobs]\nclasses = 3\n";
        assert!(ExperimentConfig::from_toml(both).unwrap_err().to_string().contains("exactly one"));
        let mut t: toml::Table = "[data]\ncsv = \"x.csv\"\n".parse().unwrap();
        apply_override(&mut t, "data.blobs.dim=2").unwrap();
        assert!(ExperimentConfig::from_table(t).is_err());
    }

    #[test]
    fn overrides_parse_literals_and_bare_strings() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.alpha=0.5").unwrap();
        apply_override(&mut t, "noise.kind=flip").unwrap();
        apply_override(&mut t, "noise.rho = 0.4").unwrap();
        apply_override(&mut t, "noise.flip_targets=[1,2,3,0]").unwrap();
        apply_override(&mut t, "experiment.ablation=mc").unwrap();
        let cfg = ExperimentConfig::from_table(t).unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        let noise = cfg.noise.unwrap();
        assert_eq!(noise.kind, NoiseKind::Flip);
        assert_eq!(noise.flip_targets, Some(vec![1, 2, 3, 0]));
        assert_eq!(cfg.experiment.ablation, Ablation::Mc);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "train.alpha").is_err());
        apply_override(&mut t, "train=1").unwrap();
        assert!(matches!(apply_override(&mut t, "train.alpha=1"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_env_overrides_master_seed() {
        let mut cfg = ExperimentConfig::from_toml("[experiment]\nseed = 3\n").unwrap();
        assert_eq!(cfg.seeds().train, 3);
        cfg.apply_seed_env(Some("11")).unwrap();
        assert_eq!(cfg.seeds().train, 11);
        assert_eq!(cfg.resolved_train().seed, 11);
        assert!(cfg.apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn ablations_differ_only_in_objective() {
        let base = ExperimentConfig::from_toml("[objective]\nlambda = 0.01\n").unwrap();
        let mut mc = base.clone();
        mc.experiment.ablation = Ablation::Mc;
        let (a, b) = (base.resolved_train(), mc.resolved_train());
        assert_eq!(a.objective.lambda, 0.01);
        assert_eq!(b.objective.lambda, 0.0);
        let mut b_fixed = b.clone();
        b_fixed.objective.lambda = a.objective.lambda;
        assert_eq!(a, b_fixed);
        let mut nb = base.clone();
        nb.experiment.ablation = Ablation::NonBayesian;
        assert_eq!(nb.resolved_train().objective.sampling, Sampling::Mean);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml("[noise]\nkind = \"uniform\"\nrho = 0.4\n").unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
