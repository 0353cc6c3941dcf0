use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_glyphs, load_idx, Corruption, LabeledDataset, StreamMode};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Glyphs {
        num_classes: usize,
        samples_per_class: usize,
        size: usize,
        noise_std: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// keep at most this many samples of each class, in file order
        #[serde(default)]
        max_per_class: Option<usize>,
    },
}

impl DatasetSpec {
    /// Relative IDX paths are taken against `base`.
    pub fn load(&self, base: &Path) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Glyphs {
                num_classes,
                samples_per_class,
                size,
                noise_std,
                seed,
            } => generate_glyphs(*num_classes, *samples_per_class, *size, *noise_std, *seed),
            DatasetSpec::Idx {
                images,
                labels,
                max_per_class,
            } => {
                let ds = load_idx(&base.join(images), &base.join(labels))?;
                ds.check_all_classes_present()?;
                Ok(match max_per_class {
                    None => ds,
                    Some(m) => {
                        let mut seen = vec![0usize; ds.num_classes()];
                        let keep: Vec<usize> = (0..ds.len())
                            .filter(|&i| {
                                let y = ds.labels()[i];
                                seen[y] += 1;
                                seen[y] <= *m
                            })
                            .collect();
                        ds.subset(&keep)
                    }
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize>, out_dim: usize },
    SmallConv { filters: [usize; 2], out_dim: usize },
}

impl ModelSpec {
    pub fn architecture(&self, channels: usize, size: usize) -> Architecture {
        match self {
            ModelSpec::Mlp { hidden, out_dim } => Architecture::Mlp {
                channels,
                size,
                hidden: hidden.clone(),
                out_dim: *out_dim,
            },
            ModelSpec::SmallConv { filters, out_dim } => Architecture::SmallConv {
                channels,
                size,
                filters: *filters,
                out_dim: *out_dim,
            },
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            hidden: vec![128, 128],
            out_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// report ensemble predictions when the model has rotation views
    pub ensemble: bool,
    pub corruptions: Vec<String>,
    pub severity: usize,
    /// write per-stage 2-D feature CSVs (needs out_dim = 2)
    pub export_features: bool,
    pub checkpoints: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ensemble: true,
            corruptions: Vec::new(),
            severity: 1,
            export_features: false,
            checkpoints: true,
        }
    }
}

impl EvalOptions {
    pub fn corruption_list(&self) -> Result<Vec<Corruption>> {
        self.corruptions
            .iter()
            .map(|k| Corruption::preset(k, self.severity))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("eval.corruptions: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    pub stream: StreamMode,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_name() -> String {
    "run".into()
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) | Error::Argument(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        };
        self.train.validate().map_err(|e| field("train", e))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::Config(format!(
                "test_fraction: {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if let DatasetSpec::Glyphs { num_classes, .. } = self.dataset {
            self.stream
                .task_sizes(num_classes)
                .map_err(|e| field("stream", e))?;
        }
        self.eval.corruption_list()?;
        if self.eval.export_features {
            let d = match &self.model {
                ModelSpec::Mlp { out_dim, .. } | ModelSpec::SmallConv { out_dim, .. } => *out_dim,
            };
            if d != 2 {
                return Err(Error::Config(format!(
                    "eval.export_features needs model.out_dim = 2, got {d}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. Key order in the source text
    /// does not matter; every default is made explicit before hashing.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        let canonical = serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    /// The same experiment reduced to a single seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}
