//! Experiment specs, resolved per-run configurations and their hashes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ifsd_core::detector::TransferStrategy;
use ifsd_core::exemplar::ExemplarMethod;
use ifsd_core::model::TaskMode;
use ifsd_core::protocol::{SessionRecipe, TrainConfig};
use ifsd_core::world::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

/// Identifies the code that produced an artifact. Part of every hash.
pub const CODE_VERSION: &str = concat!("ifsd-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    /// Report and checkpoint after every session.
    #[default]
    EverySession,
    /// Only after the last session.
    FinalSession,
}

fn default_recipe() -> SessionRecipe {
    SessionRecipe::least()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A batch of runs: one world and training setup, one recipe (or the
/// ablation grid around it) and a list of root seeds.
///
/// `world.seed`, `world.mode` and `train.seed` are filled in per run from
/// `seeds` and `mode`, so they must be left at their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_recipe")]
    pub recipe: SessionRecipe,
    pub mode: TaskMode,
    #[serde(default)]
    pub eval_cadence: EvalCadence,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn new(mode: TaskMode) -> Self {
        ExperimentSpec {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            recipe: SessionRecipe::least(),
            mode,
            eval_cadence: EvalCadence::default(),
            output_dir: default_output_dir(),
            seeds: default_seeds(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        if self.world.seed != 0 || self.train.seed != 0 {
            return Err(CliError::Config(
                "world.seed and train.seed are set per run from `seeds`".into(),
            ));
        }
        if self.world.mode != TaskMode::Typical {
            return Err(CliError::Config("set the task mode with top-level `mode`".into()));
        }
        self.world_for(self.seeds[0]).validate()?;
        self.train.validate()?;
        self.recipe.loss.validate()?;
        Ok(())
    }

    /// Hash over every field and the code version.
    pub fn hash(&self) -> String {
        canonical_hash(&(CODE_VERSION, self))
    }

    pub fn world_for(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            mode: self.mode,
            ..self.world.clone()
        }
    }

    pub fn run_config(&self, recipe: SessionRecipe, seed: u64) -> RunConfig {
        RunConfig {
            code_version: CODE_VERSION.to_string(),
            world: self.world_for(seed),
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            recipe,
            eval_cadence: self.eval_cadence,
            seed,
        }
    }

    /// One run per seed, or 24 per seed with `grid`.
    pub fn runs(&self, grid: bool) -> Vec<RunConfig> {
        let recipes = if grid {
            grid_recipes(&self.recipe)
        } else {
            vec![self.recipe.clone()]
        };
        self.seeds
            .iter()
            .flat_map(|&seed| recipes.iter().map(move |r| self.run_config(r.clone(), seed)))
            .collect()
    }
}

/// {FIT_CSE, FIT_ALL, FIX_ALL} x {without, with distillation} x
/// {no, clustering, random, class-mean exemplars}, keeping the loss and
/// remaining settings of `template`.
pub fn grid_recipes(template: &SessionRecipe) -> Vec<SessionRecipe> {
    let mut out = Vec::with_capacity(24);
    for strategy in [TransferStrategy::FitCse, TransferStrategy::FitAll, TransferStrategy::FixAll] {
        for use_distillation in [false, true] {
            for exemplar_method in [
                ExemplarMethod::None,
                ExemplarMethod::Clustering,
                ExemplarMethod::Random,
                ExemplarMethod::ClassMean,
            ] {
                out.push(SessionRecipe {
                    strategy,
                    use_distillation,
                    exemplar_method,
                    ..template.clone()
                });
            }
        }
    }
    out
}

/// Everything one run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub code_version: String,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub recipe: SessionRecipe,
    pub eval_cadence: EvalCadence,
    pub seed: u64,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn label(&self) -> String {
        self.recipe.label()
    }

    /// Hash of the shared setting: equal for runs that differ only in seed
    /// or in the three recipe axes of the grid.
    pub fn setting_hash(&self) -> String {
        let mut c = self.clone();
        c.world.seed = 0;
        c.train.seed = 0;
        c.seed = 0;
        c.recipe = SessionRecipe {
            strategy: TransferStrategy::FitCse,
            use_distillation: true,
            exemplar_method: ExemplarMethod::Clustering,
            ..c.recipe
        };
        canonical_hash(&c)
    }

    /// Key of the pre-trained model, which ignores the transfer recipe
    /// apart from its loss settings.
    pub fn pretrain_key(&self) -> String {
        canonical_hash(&(&self.code_version, &self.world, &self.train, &self.recipe.loss))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON form. Object keys come out sorted, so the
/// hash is independent of field order in the source file.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("spec types serialize");
    sha256_hex(v.to_string().as_bytes())
}

/// First 16 hex digits, used in directory names.
pub fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}
