use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{
    equal_quotas, load_csv, synth_generate, AffinitySpec, DomainDataset, Schema, SplitFractions,
};
use crate::error::{Error, Result};
use crate::metrics::OverallMode;
use crate::selection::{validate_subsets, Subset, ValueAggregation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Sdsp,
    FullShare,
    FixedSubset,
    ExhaustiveOracle,
}

/// What the selector is rewarded with after each interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reward {
    #[default]
    Auc,
    /// Validation LogLoss with the sign flipped.
    NegLogloss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        schema: PathBuf,
    },
    Synth {
        #[serde(flatten)]
        spec: AffinitySpec,
        sizes: Vec<usize>,
        /// Generator seed; defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

/// Loaded dataset plus the number of rows the CSV reader skipped.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: DomainDataset,
    pub malformed_rows: usize,
}

impl DatasetSource {
    /// Relative CSV paths resolve against `base`.
    pub fn load(&self, run_seed: u64, base: Option<&Path>) -> Result<LoadedData> {
        match self {
            DatasetSource::Csv { path, schema } => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let schema = Schema::load(resolve(schema))?;
                let loaded = load_csv(resolve(path), &schema)?;
                Ok(LoadedData {
                    malformed_rows: loaded.malformed.len(),
                    dataset: loaded.dataset,
                })
            }
            DatasetSource::Synth { spec, sizes, seed } => Ok(LoadedData {
                dataset: synth_generate(spec, sizes, seed.unwrap_or(run_seed))?,
                malformed_rows: 0,
            }),
        }
    }

    pub fn total_samples(&self) -> Option<usize> {
        match self {
            DatasetSource::Synth { sizes, .. } => Some(sizes.iter().sum()),
            DatasetSource::Csv { .. } => None,
        }
    }
}

fn default_lr() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    1e-4
}
fn default_prototypes() -> usize {
    10
}
fn default_decay() -> f64 {
    0.9
}
fn default_period() -> usize {
    2
}
fn default_p0() -> f64 {
    1.0
}
fn default_batch() -> usize {
    4096
}
fn default_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    5
}
fn default_embedding_dim() -> usize {
    8
}
fn default_expert_hidden() -> Vec<usize> {
    vec![64]
}
fn default_repr_dim() -> usize {
    32
}
fn default_tower_hidden() -> Vec<usize> {
    vec![16]
}

/// Full description of a run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    pub dataset: DatasetSource,
    /// Number of domains, `D`.
    pub domains: usize,
    /// `E_d`; defaults to one expert per domain.
    #[serde(default)]
    pub experts_per_domain: Option<Vec<usize>>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_expert_hidden")]
    pub expert_hidden: Vec<usize>,
    #[serde(default = "default_repr_dim")]
    pub repr_dim: usize,
    #[serde(default = "default_tower_hidden")]
    pub tower_hidden: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Per-domain share of each batch; defaults to an equal split.
    #[serde(default)]
    pub quotas: Option<Vec<usize>>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Weight of the prototype reconstruction loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Prototypes per domain, `M`.
    #[serde(default = "default_prototypes")]
    pub prototypes: usize,
    #[serde(default = "default_decay")]
    pub decay_rate: f64,
    /// Optimizer steps between selection rounds, `l`.
    #[serde(default = "default_period")]
    pub selection_period: usize,
    #[serde(default = "default_p0")]
    pub initial_exploration: f64,
    #[serde(default)]
    pub value_aggregation: ValueAggregation,
    #[serde(default)]
    pub reward: Reward,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Optimizer steps per epoch; defaults to one pass over the training set.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub overall_mode: OverallMode,
    /// Per-domain subsets for `fixed-subset` mode.
    #[serde(default)]
    pub subsets: Option<Vec<Subset>>,
}

impl RunConfig {
    /// Minimal configuration over the given dataset with every other field at
    /// its default.
    pub fn new(dataset: DatasetSource, domains: usize) -> Self {
        Self {
            seed: 0,
            mode: Mode::default(),
            dataset,
            domains,
            experts_per_domain: None,
            embedding_dim: default_embedding_dim(),
            expert_hidden: default_expert_hidden(),
            repr_dim: default_repr_dim(),
            tower_hidden: default_tower_hidden(),
            batch_size: default_batch(),
            quotas: None,
            learning_rate: default_lr(),
            gamma: default_gamma(),
            prototypes: default_prototypes(),
            decay_rate: default_decay(),
            selection_period: default_period(),
            initial_exploration: default_p0(),
            value_aggregation: ValueAggregation::default(),
            reward: Reward::default(),
            epochs: default_epochs(),
            patience: default_patience(),
            steps_per_epoch: None,
            split: SplitFractions::default(),
            overall_mode: OverallMode::default(),
            subsets: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn experts(&self) -> Vec<usize> {
        self.experts_per_domain
            .clone()
            .unwrap_or_else(|| vec![1; self.domains])
    }

    pub fn batch_quotas(&self) -> Vec<usize> {
        self.quotas
            .clone()
            .unwrap_or_else(|| equal_quotas(self.batch_size, self.domains))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            domains: self.domains,
            experts_per_domain: self.experts(),
            embedding_dim: self.embedding_dim,
            expert_hidden: self.expert_hidden.clone(),
            repr_dim: self.repr_dim,
            tower_hidden: self.tower_hidden.clone(),
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::Config("domains must be positive".into()));
        }
        self.backbone().validate()?;
        if let DatasetSource::Synth { spec, sizes, .. } = &self.dataset {
            spec.validate()?;
            if spec.domains() != self.domains || sizes.len() != self.domains {
                return Err(Error::Config(format!(
                    "synthetic dataset describes {} domains with {} sizes, config has {}",
                    spec.domains(),
                    sizes.len(),
                    self.domains
                )));
            }
        }
        if self.batch_size < self.domains {
            return Err(Error::Config(format!(
                "batch_size {} cannot give each of {} domains a sample",
                self.batch_size, self.domains
            )));
        }
        if let Some(q) = &self.quotas {
            if q.len() != self.domains || q.contains(&0) {
                return Err(Error::Config(
                    "quotas need one positive entry per domain".into(),
                ));
            }
            if q.iter().sum::<usize>() != self.batch_size {
                return Err(Error::Config(format!(
                    "quotas sum to {}, batch_size is {}",
                    q.iter().sum::<usize>(),
                    self.batch_size
                )));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(
                "gamma must be finite and non-negative".into(),
            ));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("prototypes must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_exploration) {
            return Err(Error::Config(
                "initial_exploration must lie in [0, 1]".into(),
            ));
        }
        if let ValueAggregation::Ema { alpha } = self.value_aggregation {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::Config("ema alpha must lie in (0, 1]".into()));
            }
        }
        if self.selection_period == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "selection_period and epochs must be positive".into(),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.split.validate()?;
        match (self.mode, &self.subsets) {
            (Mode::FixedSubset, Some(s)) => validate_subsets(s, self.domains)?,
            (Mode::FixedSubset, None) => {
                return Err(Error::Config("fixed-subset mode needs `subsets`".into()));
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "`subsets` only applies to fixed-subset mode".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 7
mode = "sdsp"
domains = 3
batch_size = 300
learning_rate = 0.05

[dataset]
kind = "synth"
affinity = [[1.0, 0.8, 0.0], [0.8, 1.0, 0.0], [0.0, 0.0, 1.0]]
noise = [0.05, 0.05, 0.05]
sizes = [1000, 1000, 1000]

[value_aggregation]
kind = "ema"
alpha = 0.3
"#;

    #[test]
    fn parse_and_defaults() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.prototypes, 10);
        assert_eq!(cfg.decay_rate, 0.9);
        assert_eq!(cfg.selection_period, 2);
        assert_eq!(cfg.gamma, 1e-4);
        assert_eq!(cfg.experts(), vec![1, 1, 1]);
        assert_eq!(cfg.batch_quotas(), vec![100, 100, 100]);
        assert_eq!(cfg.value_aggregation, ValueAggregation::Ema { alpha: 0.3 });
        match &cfg.dataset {
            DatasetSource::Synth { spec, .. } => assert_eq!(spec.fields, 8),
            other => panic!("{other:?}"),
        }
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn default_quotas_match_batch() {
        let cfg = RunConfig::new(
            DatasetSource::Synth {
                spec: AffinitySpec::planted(),
                sizes: vec![10; 3],
                seed: None,
            },
            3,
        );
        assert_eq!(cfg.batch_quotas(), vec![1366, 1365, 1365]);
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = |from: &str, to: &str| RunConfig::parse(&EXAMPLE.replace(from, to)).unwrap_err();
        assert!(matches!(
            bad("learning_rate = 0.05", "learning_rate = 0.0"),
            Error::Config(_)
        ));
        assert!(matches!(
            bad("domains = 3", "domains = 2"),
            Error::Config(_)
        ));
        assert!(matches!(
            bad("seed = 7", "seed = 7\nbogus = 1"),
            Error::Config(_)
        ));
        assert!(matches!(
            bad("mode = \"sdsp\"", "mode = \"fixed-subset\""),
            Error::Config(_)
        ));
        let pinned = EXAMPLE.replace(
            "mode = \"sdsp\"",
            "mode = \"fixed-subset\"\nsubsets = [[1], [1], [2]]",
        );
        assert!(matches!(
            RunConfig::parse(&pinned),
            Err(Error::Invariant(_))
        ));
    }
}
