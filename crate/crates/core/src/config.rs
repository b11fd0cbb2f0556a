//! Experiment configuration files (TOML or JSON).
//!
//! Unknown keys are rejected and every error names the offending field path,
//! e.g. `train.rho_f`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    make_blob_domain, make_two_moons, read_idx, source_combine, split, standardize, BlobSpec, DomainDataset,
};
use crate::dumps::read_dataset;
use crate::error::{MudaError, Result};
use crate::nets::{LayerSpec, NetworkSpec};
use crate::trainer::{derive_seed, streams, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Run directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Source moons against the same construction rotated by `rotation_deg`.
    Moons {
        #[serde(default = "default_moons_n")]
        n: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default = "default_rotation")]
        rotation_deg: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// One source domain per entry of `source_shifts`, combined for training.
    Blobs {
        n: usize,
        k: usize,
        source_shifts: Vec<Vec<f64>>,
        target_shift: Vec<f64>,
        #[serde(default = "default_blob_radius")]
        radius: f64,
        #[serde(default = "default_blob_std")]
        std: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Files {
        sources: Vec<FileDomain>,
        target: FileDomain,
        num_classes: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Standardize every domain by the combined source-training statistics.
        #[serde(default)]
        standardize: bool,
    },
}

fn default_moons_n() -> usize {
    1000
}
fn default_noise() -> f64 {
    crate::data::MOONS_NOISE_STD
}
fn default_rotation() -> f64 {
    30.0
}
fn default_test_fraction() -> f64 {
    0.5
}
fn default_blob_radius() -> f64 {
    3.0
}
fn default_blob_std() -> f64 {
    0.8
}

/// A domain stored on disk: either a dataset dump, or IDX inputs with
/// optional IDX labels. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDomain {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    /// Three dense/batch-norm/ReLU blocks, a dense/ReLU/dropout block and a
    /// linear softmax classifier, 15 hidden units throughout.
    #[default]
    Toy,
    Custom {
        feature_layers: Vec<LayerSpec>,
        classifier_layers: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// MC passes per divergence-tracker measurement.
    pub tracker_passes: usize,
    /// Rows of the target test set held fixed for tracking and the
    /// ensemble dump.
    pub tracker_batch: usize,
    /// Write measured epoch times into the metrics CSVs instead of 0.
    pub wall_clock: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            tracker_passes: crate::uncertainty::DEFAULT_PASSES,
            tracker_batch: 256,
            wall_clock: false,
        }
    }
}

/// Train/test partitions of every domain of an experiment.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

impl ExperimentConfig {
    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MudaError::config("config", format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::Files { sources, target, .. } = &mut self.data {
            for domain in sources.iter_mut().chain(std::iter::once(target)) {
                for p in [&mut domain.dump, &mut domain.inputs, &mut domain.labels]
                    .into_iter()
                    .flatten()
                {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(MudaError::config("name", "must not be empty"));
        }
        self.train.validate("train")?;
        if self.analysis.tracker_passes < 2 {
            return Err(MudaError::config("analysis.tracker_passes", "need at least 2 passes"));
        }
        if self.analysis.tracker_batch == 0 {
            return Err(MudaError::config("analysis.tracker_batch", "must be at least 1"));
        }
        let fraction_ok = |f: f64| f > 0.0 && f < 1.0;
        match &self.data {
            DataConfig::Moons {
                n,
                noise_std,
                test_fraction,
                ..
            } => {
                if *n < 4 || n % 2 != 0 {
                    return Err(MudaError::config("data.n", format!("need an even n ≥ 4, got {n}")));
                }
                if noise_std.is_nan() || *noise_std < 0.0 {
                    return Err(MudaError::config("data.noise_std", "must be non-negative"));
                }
                if !fraction_ok(*test_fraction) {
                    return Err(MudaError::config("data.test_fraction", "must lie in (0, 1)"));
                }
            }
            DataConfig::Blobs {
                n,
                k,
                source_shifts,
                target_shift,
                test_fraction,
                ..
            } => {
                if *k < 2 {
                    return Err(MudaError::config("data.k", "need at least 2 classes"));
                }
                if *n < 2 {
                    return Err(MudaError::config("data.n", "need at least 2 samples"));
                }
                if source_shifts.is_empty() {
                    return Err(MudaError::config(
                        "data.source_shifts",
                        "need at least one source domain",
                    ));
                }
                if target_shift.is_empty() {
                    return Err(MudaError::config("data.target_shift", "must not be empty"));
                }
                for (i, s) in source_shifts.iter().enumerate() {
                    if s.len() != target_shift.len() {
                        return Err(MudaError::config(
                            format!("data.source_shifts[{i}]"),
                            format!("has {} dimensions, target_shift has {}", s.len(), target_shift.len()),
                        ));
                    }
                }
                if !fraction_ok(*test_fraction) {
                    return Err(MudaError::config("data.test_fraction", "must lie in (0, 1)"));
                }
            }
            DataConfig::Files {
                sources,
                target,
                num_classes,
                test_fraction,
                ..
            } => {
                if sources.is_empty() {
                    return Err(MudaError::config("data.sources", "need at least one source domain"));
                }
                for (i, d) in sources.iter().enumerate() {
                    d.validate(&format!("data.sources[{i}]"))?;
                }
                target.validate("data.target")?;
                if *num_classes < 2 {
                    return Err(MudaError::config("data.num_classes", "need at least 2 classes"));
                }
                if !fraction_ok(*test_fraction) {
                    return Err(MudaError::config("data.test_fraction", "must lie in (0, 1)"));
                }
            }
        }
        if let NetworkConfig::Custom {
            feature_layers,
            classifier_layers,
        } = &self.network
        {
            // Dimensions are checked once the data is known.
            if feature_layers.is_empty() || classifier_layers.is_empty() {
                return Err(MudaError::config(
                    "network",
                    "custom networks need feature and classifier layers",
                ));
            }
        }
        Ok(())
    }

    /// Builds every domain; all randomness derives from `seed`.
    pub fn domains(&self, seed: u64) -> Result<Domains> {
        let split_seed = derive_seed(seed, streams::DATA_SPLIT);
        let halves = |ds: &DomainDataset, f: f64| -> Result<(DomainDataset, DomainDataset)> {
            let mut parts = split(ds, &[1.0 - f, f], split_seed)?;
            let test = parts.pop().expect("two parts");
            Ok((parts.pop().expect("two parts"), test))
        };
        match &self.data {
            DataConfig::Moons {
                n,
                noise_std,
                rotation_deg,
                test_fraction,
            } => {
                let source = make_two_moons(*n, *noise_std, 0.0, derive_seed(seed, streams::DATA_SOURCE))?;
                let target = make_two_moons(*n, *noise_std, *rotation_deg, derive_seed(seed, streams::DATA_TARGET))?;
                let (source_train, source_test) = halves(&source, *test_fraction)?;
                let (target_train, target_test) = halves(&target, *test_fraction)?;
                Ok(Domains {
                    source_train,
                    source_test,
                    target_train,
                    target_test,
                })
            }
            DataConfig::Blobs {
                n,
                k,
                source_shifts,
                target_shift,
                radius,
                std,
                test_fraction,
            } => {
                let spec = BlobSpec {
                    n: *n,
                    k: *k,
                    radius: *radius,
                    std: *std,
                };
                let mut trains = Vec::new();
                let mut tests = Vec::new();
                for (i, shift) in source_shifts.iter().enumerate() {
                    let ds = make_blob_domain(&spec, shift, blob_source_seed(seed, i), &format!("blobs_source{i}"))?;
                    let (tr, te) = halves(&ds, *test_fraction)?;
                    trains.push(tr);
                    tests.push(te);
                }
                let target = make_blob_domain(
                    &spec,
                    target_shift,
                    derive_seed(seed, streams::DATA_TARGET),
                    "blobs_target",
                )?;
                let (target_train, target_test) = halves(&target, *test_fraction)?;
                Ok(Domains {
                    source_train: source_combine(&trains)?,
                    source_test: source_combine(&tests)?,
                    target_train,
                    target_test,
                })
            }
            DataConfig::Files {
                sources,
                target,
                num_classes,
                test_fraction,
                standardize: normalize,
            } => {
                let mut trains = Vec::new();
                let mut tests = Vec::new();
                for (i, d) in sources.iter().enumerate() {
                    let ds = d.load(*num_classes, &format!("source{i}"))?;
                    ds.require_labels()?;
                    let (tr, te) = halves(&ds, *test_fraction)?;
                    trains.push(tr);
                    tests.push(te);
                }
                let target = target.load(*num_classes, "target")?;
                let (target_train, target_test) = halves(&target, *test_fraction)?;
                let mut domains = Domains {
                    source_train: source_combine(&trains)?,
                    source_test: source_combine(&tests)?,
                    target_train,
                    target_test,
                };
                if *normalize {
                    let (train, stats) = standardize(&domains.source_train, None)?;
                    domains.source_train = train;
                    domains.source_test = standardize(&domains.source_test, Some(&stats))?.0;
                    domains.target_train = standardize(&domains.target_train, Some(&stats))?.0;
                    domains.target_test = standardize(&domains.target_test, Some(&stats))?.0;
                }
                Ok(domains)
            }
        }
    }

    /// Network layout for data of dimension `input_dim` with `num_classes` classes.
    pub fn network_spec(&self, input_dim: usize, num_classes: usize) -> Result<NetworkSpec> {
        let spec = match &self.network {
            NetworkConfig::Toy => NetworkSpec::toy(input_dim, num_classes),
            NetworkConfig::Custom {
                feature_layers,
                classifier_layers,
            } => NetworkSpec {
                input_dim,
                num_classes,
                feature_layers: feature_layers.clone(),
                classifier_layers: classifier_layers.clone(),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Seed of the `i`-th blob source domain.
pub fn blob_source_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, streams::DATA_SOURCE).wrapping_add(i as u64)
}

impl FileDomain {
    fn validate(&self, path: &str) -> Result<()> {
        match (&self.dump, &self.inputs) {
            (Some(_), None) if self.labels.is_none() => Ok(()),
            (None, Some(_)) => Ok(()),
            _ => Err(MudaError::config(
                path,
                "give either `dump`, or `inputs` with optional `labels`",
            )),
        }
    }

    pub fn load(&self, num_classes: usize, default_id: &str) -> Result<DomainDataset> {
        let id = self.id.clone().unwrap_or_else(|| default_id.to_string());
        if let Some(dump) = &self.dump {
            let ds = read_dataset(dump)?;
            if ds.num_classes() != num_classes {
                return Err(MudaError::Validation(format!(
                    "{} has {} classes, config says {num_classes}",
                    dump.display(),
                    ds.num_classes()
                )));
            }
            return Ok(ds.with_domain_id(id));
        }
        let inputs_path = self.inputs.as_ref().expect("validated");
        let raw = read_idx(inputs_path)?;
        let n = raw.shape()[0];
        let d = raw.len() / n;
        let inputs = raw.reshape(vec![n, d])?;
        let labels = match &self.labels {
            Some(p) => {
                let t = read_idx(p)?;
                if t.len() != n {
                    return Err(MudaError::Validation(format!(
                        "{} holds {} labels for {n} inputs",
                        p.display(),
                        t.len()
                    )));
                }
                // u8 label files are rescaled on read; undo it.
                Some(t.data().iter().map(|v| (v * 255.0).round() as usize).collect())
            }
            None => None,
        };
        DomainDataset::new(inputs, labels, id, num_classes)
    }
}

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>) -> MudaError {
    let path = err.path().to_string();
    let path = if path == "." { "<root>".to_string() } else { path };
    MudaError::config(path, err.inner().to_string())
}
