//! Run configuration, read from TOML with every key checked.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{self, Dataset};
use crate::error::{ConfigError, DataError};
use crate::model::{ArchConfig, LikelihoodKind};
use crate::objective::ContrastiveSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Generator seed; the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_separation() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Cache root; `$TREEVAE_DATA` or `~/.cache/treevae` when absent.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Keep only the first `max_train` training samples.
    #[serde(default)]
    pub max_train: Option<usize>,
    /// Augmentation applied to training batches (one of the policy names).
    #[serde(default)]
    pub augmentation: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchBlock {
    /// Only dense encoders are implemented.
    pub encoder: String,
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    /// One entry per depth, or a single entry used at every depth.
    pub latent_dims: Vec<usize>,
    pub max_depth: usize,
    pub bottom_up_width: usize,
    pub transform_width: usize,
    pub router_width: usize,
    pub root_merge_prior: bool,
    /// Overrides the likelihood implied by the dataset.
    pub likelihood: Option<LikelihoodKind>,
}

impl Default for ArchBlock {
    fn default() -> Self {
        Self {
            encoder: "dense".into(),
            encoder_hidden: None,
            decoder_hidden: None,
            latent_dims: vec![8],
            max_depth: 6,
            bottom_up_width: 128,
            transform_width: 128,
            router_width: 128,
            root_merge_prior: true,
            likelihood: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthSchedule {
    /// Epochs per growth step.
    pub epochs_per_step: usize,
    pub final_epochs: usize,
    /// Full-tree fine-tune after every this many growth steps (0 disables).
    pub intermediate_every: usize,
    pub intermediate_epochs: usize,
    pub max_leaves: usize,
    pub subset_threshold: f64,
    pub prune_threshold: f64,
    pub anneal_growth: f64,
    pub anneal_final: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Monte Carlo samples per input during training.
    pub samples: usize,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        Self {
            epochs_per_step: 150,
            final_epochs: 200,
            intermediate_every: 3,
            intermediate_epochs: 80,
            max_leaves: 10,
            subset_threshold: 0.01,
            prune_threshold: 0.01,
            anneal_growth: 0.001,
            anneal_final: 0.01,
            learning_rate: 1e-3,
            batch_size: 256,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveBlock {
    pub enabled: bool,
    pub weight: f64,
    pub tau_embed: f64,
    pub tau_router: f64,
    pub projection: (usize, usize),
    pub augmentation: String,
}

impl Default for ContrastiveBlock {
    fn default() -> Self {
        let s = ContrastiveSettings::default();
        Self {
            enabled: false,
            weight: s.weight,
            tau_embed: s.tau_embed,
            tau_router: s.tau_router,
            projection: (512, 64),
            augmentation: "contrastive".into(),
        }
    }
}

impl ContrastiveBlock {
    pub fn settings(&self) -> Option<ContrastiveSettings> {
        self.enabled.then_some(ContrastiveSettings {
            weight: self.weight,
            tau_embed: self.tau_embed,
            tau_router: self.tau_router,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationBlock {
    /// Monte Carlo samples for the reported ELBO and reconstruction loss.
    pub samples: usize,
    /// Importance samples for the log-likelihood (0 skips it).
    pub iw_samples: usize,
    pub iw_chunk: usize,
    /// Representative samples per leaf in tree exports.
    pub top_k: usize,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self {
            samples: 10,
            iw_samples: 1000,
            iw_chunk: 100,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchBlock,
    #[serde(default)]
    pub growth: GrowthSchedule,
    #[serde(default)]
    pub contrastive: ContrastiveBlock,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
    #[serde(default)]
    pub seed: u64,
    /// Train in 64-bit floats and keep every step single-threaded.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let g = &self.growth;
        if g.epochs_per_step == 0 || g.final_epochs == 0 {
            return bad("growth.epochs_per_step and growth.final_epochs must be positive".into());
        }
        if !(g.subset_threshold > 0.0 && g.subset_threshold < 1.0) {
            return bad(format!(
                "growth.subset_threshold must lie in (0, 1), got {}",
                g.subset_threshold
            ));
        }
        if !(0.0..1.0).contains(&g.prune_threshold) {
            return bad(format!(
                "growth.prune_threshold must lie in [0, 1), got {}",
                g.prune_threshold
            ));
        }
        if g.max_leaves < 2 {
            return bad("growth.max_leaves must be at least 2".into());
        }
        if g.batch_size == 0 || g.samples == 0 || g.learning_rate <= 0.0 {
            return bad("growth.batch_size, growth.samples and growth.learning_rate must be positive".into());
        }
        if self.arch.encoder != "dense" {
            return bad(format!(
                "arch.encoder `{}` is not available; use `dense`",
                self.arch.encoder
            ));
        }
        if self.arch.max_depth == 0 {
            return bad("arch.max_depth must be at least 1".into());
        }
        let n = self.arch.latent_dims.len();
        if n != 1 && n != self.arch.max_depth + 1 {
            return bad(format!(
                "arch.latent_dims needs 1 or {} entries, got {n}",
                self.arch.max_depth + 1
            ));
        }
        if self.evaluation.samples == 0 || self.evaluation.iw_chunk == 0 {
            return bad("evaluation.samples and evaluation.iw_chunk must be positive".into());
        }
        let policies = [Some(&self.contrastive.augmentation), self.dataset.augmentation.as_ref()];
        for name in policies.into_iter().flatten() {
            if AugmentationPolicy::by_name(name).is_none() {
                return bad(format!("unknown augmentation policy `{name}`"));
            }
        }
        if self.contrastive.enabled {
            if self.contrastive.weight < 0.0 || self.contrastive.tau_embed <= 0.0 || self.contrastive.tau_router <= 0.0
            {
                return bad("contrastive weight must be non-negative and temperatures positive".into());
            }
            if g.batch_size < 2 {
                return bad("contrastive training needs batch_size >= 2".into());
            }
        }
        if self.dataset.name == "synthetic" {
            match &self.dataset.synthetic {
                None => return bad("dataset `synthetic` needs a [dataset.synthetic] table".into()),
                Some(s) if s.clusters < 2 || !s.clusters.is_power_of_two() => {
                    return bad(format!(
                        "dataset.synthetic.clusters must be a power of two, got {}",
                        s.clusters
                    ))
                }
                Some(s) if s.n == 0 || s.dim == 0 => return bad("dataset.synthetic.n and .dim must be positive".into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.dataset.root.clone().unwrap_or_else(data::default_root)
    }

    pub fn load_dataset(&self) -> Result<Dataset, DataError> {
        let mut d = match (&self.dataset.synthetic, self.dataset.name.as_str()) {
            (Some(s), "synthetic") => {
                data::synthetic_hierarchical(s.n, s.dim, s.clusters, s.separation, s.seed.unwrap_or(self.seed))
            }
            (_, name) => data::load_dataset(name, &self.data_root())?,
        };
        if let Some(n) = self.dataset.max_train {
            d.truncate_train(n);
        }
        Ok(d)
    }

    /// Architecture for a dataset with the given input shape and default likelihood.
    pub fn arch_config(&self, input_shape: &[usize], likelihood: LikelihoodKind) -> ArchConfig {
        let likelihood = self.arch.likelihood.unwrap_or(likelihood);
        let mut a = ArchConfig::small(input_shape.to_vec(), likelihood);
        let b = &self.arch;
        if let Some(e) = &b.encoder_hidden {
            a.encoder_hidden = e.clone();
        }
        if let Some(d) = &b.decoder_hidden {
            a.decoder_hidden = d.clone();
        }
        a.max_depth = b.max_depth;
        a.latent_dims = if b.latent_dims.len() == 1 {
            vec![b.latent_dims[0]; b.max_depth + 1]
        } else {
            b.latent_dims.clone()
        };
        a.bottom_up_width = b.bottom_up_width;
        a.transform_width = b.transform_width;
        a.router_width = b.router_width;
        a.root_merge_prior = b.root_merge_prior;
        a.projection = self.contrastive.enabled.then_some(self.contrastive.projection);
        a
    }
}
