//! Audit configuration: one TOML file with every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::intervention::InterventionConfig;
use crate::io::{derive_seed, sha256_hex};
use crate::model::{ModelConfig, TrainOptions};
use crate::subspace::SubspaceConfig;

/// Explicit per-stage seeds. Unset entries are derived from the global seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    pub corpus: Option<u64>,
    pub model: Option<u64>,
    pub subspace: Option<u64>,
    pub attack: Option<u64>,
}

/// Resolved seeds of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub corpus: u64,
    pub model: u64,
    pub subspace: u64,
    pub attack: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub global_seed: u64,
    pub output_dir: PathBuf,
    pub seeds: SeedOverrides,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub subspace: SubspaceConfig,
    pub attack: AttackConfig,
    pub intervention: InterventionConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            global_seed: 1,
            output_dir: PathBuf::from("audit-out"),
            seeds: SeedOverrides::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainOptions::default(),
            subspace: SubspaceConfig::default(),
            attack: AttackConfig::default(),
            intervention: InterventionConfig::default(),
        }
    }
}

impl AuditConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.subspace.validate()?;
        self.attack.validate()?;
        self.intervention.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model vocabulary ({}) differs from corpus vocabulary ({})",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.model.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(format!(
                "model sample rate ({}) differs from corpus sample rate ({})",
                self.model.sample_rate, self.corpus.sample_rate
            )));
        }
        if let Some(&l) = self.subspace.layers.iter().find(|&&l| l == 0 || l > self.model.n_layers) {
            return Err(Error::LayerOutOfRange {
                layer: l,
                n_layers: self.model.n_layers,
            });
        }
        if let Some(&k) = self.subspace.ks.iter().find(|&&k| k == 0 || k >= self.model.hidden_dim) {
            return Err(Error::Config(format!(
                "subspace k must satisfy 1 <= k < {}, got {k}",
                self.model.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let g = self.global_seed;
        Seeds {
            global: g,
            corpus: self.seeds.corpus.unwrap_or_else(|| derive_seed(g, "corpus")),
            model: self.seeds.model.unwrap_or_else(|| derive_seed(g, "model")),
            subspace: self.seeds.subspace.unwrap_or_else(|| derive_seed(g, "subspace")),
            attack: self.seeds.attack.unwrap_or_else(|| derive_seed(g, "attack")),
        }
    }

    /// Copy with the resolved seeds written into every stage config.
    pub fn resolved(&self) -> Self {
        let s = self.seeds();
        let mut c = self.clone();
        c.corpus.seed = s.corpus;
        c.model.seed = s.model;
        c.subspace.seed = s.subspace;
        c.attack.seed = s.attack;
        c
    }

    /// Hash of every setting that can change a result. The output directory
    /// is excluded.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seeds: Seeds,
            config: &'a AuditConfig,
        }
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&Hashed {
            seeds: self.seeds(),
            config: &c,
        })
        .expect("config serializes");
        sha256_hex(text.as_bytes())
    }
}
