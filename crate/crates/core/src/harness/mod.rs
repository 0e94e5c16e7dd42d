//! Experiment runner: configuration, the staged pipeline and reports.
//!
//! A run directory holds every stage's artifacts:
//!
//! ```text
//! config.toml                     resolved configuration
//! data/meta_{train,val,test}.*    dataset files
//! checkpoints/pretrained.*        pre-trained embedding
//! checkpoints/<adapter>.*         meta-learned initializations
//! pretrain.json, meta_train.json  training traces
//! episodes.csv                    per-episode metrics with an aggregate footer
//! results.json, results.txt       the result table
//! ```

mod pipeline;
mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::pretrain::PretrainConfig;
use crate::adapters::{AdaptConfig, AdapterKind};
use crate::episodes::{ContinuousSpec, EpisodeSpec, Sampler};
use crate::network::Architecture;
use crate::retrieval::Cutoffs;
use crate::synthgen::{AttributeSwitchSpec, ContinuousPoseSpec, GaussianSpec};

pub use pipeline::{compare_gap_levels, eval, gen, meta_train, pretrain, run, GapLevel, GapReport, GapTrend};
pub use report::{growth_rate, ResultRow, ResultTable};

/// Split roles, in order; also the dataset file stems of a run.
pub const ROLES: [&str; 3] = ["meta_train", "meta_val", "meta_test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Gen,
    Pretrain,
    MetaTrain,
    Eval,
    GapSweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Gen => "gen",
            Self::Pretrain => "pretrain",
            Self::MetaTrain => "meta-train",
            Self::Eval => "eval",
            Self::GapSweep => "gap-sweep",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {source:#}")]
pub struct HarnessError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl HarnessError {
    pub fn new(stage: Stage, source: impl Into<anyhow::Error>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

/// Attaches a stage to errors of any kind.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T, E: Into<anyhow::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::new(stage, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Gaussian(GaussianSpec),
    Continuous(ContinuousPoseSpec),
    AttributeSwitch(AttributeSwitchSpec),
    /// Existing dataset files named after [`ROLES`].
    Files { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodesConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub test_episodes: usize,
    /// Labeled-pair budgets evaluated on continuous data.
    pub pair_budgets: Vec<usize>,
    /// Labeled pairs per meta-training and validation episode on continuous data.
    pub meta_pair_budget: usize,
    pub prediction: usize,
    pub partners: usize,
}

impl Default for EpisodesConfig {
    fn default() -> Self {
        let d = EpisodeSpec::default();
        let c = ContinuousSpec::default();
        Self {
            way: d.way,
            shot: d.shot,
            query: d.query,
            test_episodes: 600,
            pair_budgets: vec![0, 25, 100, 300],
            meta_pair_budget: 100,
            prediction: c.prediction,
            partners: c.partners,
        }
    }
}

impl EpisodesConfig {
    pub fn discrete(&self) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }

    pub fn continuous(&self, pair_budget: usize) -> Sampler {
        Sampler::Continuous {
            pair_budget,
            spec: ContinuousSpec {
                prediction: self.prediction,
                partners: self.partners,
            },
        }
    }
}

/// Per-adapter changes to `[adapt.default]`; absent keys keep the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_meta_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_steps: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_selected_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_episodes: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub default: AdaptConfig,
    pub sft: AdaptOverride,
    pub maml: AdaptOverride,
    pub mtl: AdaptOverride,
    pub crml: AdaptOverride,
}

impl AdaptSection {
    pub fn resolve(&self, kind: AdapterKind) -> AdaptConfig {
        let o = match kind {
            AdapterKind::None => return self.default.clone(),
            AdapterKind::Sft => &self.sft,
            AdapterKind::Maml => &self.maml,
            AdapterKind::Mtl => &self.mtl,
            AdapterKind::Crml => &self.crml,
        };
        let d = &self.default;
        AdaptConfig {
            inner_lr: o.inner_lr.unwrap_or(d.inner_lr),
            outer_lr: o.outer_lr.unwrap_or(d.outer_lr),
            inner_steps: o.inner_steps.unwrap_or(d.inner_steps),
            max_meta_iterations: o.max_meta_iterations.unwrap_or(d.max_meta_iterations),
            select_steps: o.select_steps.unwrap_or(d.select_steps),
            max_selected_steps: o.max_selected_steps.unwrap_or(d.max_selected_steps),
            validation_episodes: o.validation_episodes.unwrap_or(d.validation_episodes),
            loss: d.loss.clone(),
        }
    }
}

fn default_adapters() -> Vec<AdapterKind> {
    AdapterKind::ALL.to_vec()
}

/// One experiment. Every random choice derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Run directory; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_adapters")]
    pub adapters: Vec<AdapterKind>,
    pub dataset: DatasetConfig,
    /// Inferred from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Architecture>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub episodes: EpisodesConfig,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub eval: Cutoffs,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).at(Stage::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::new(Stage::Config, anyhow::anyhow!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::new(Stage::Config, anyhow::anyhow!(m)));
        if self.adapters.is_empty() {
            return fail("adapter list is empty".into());
        }
        if self.adapters.iter().collect::<BTreeSet<_>>().len() != self.adapters.len() {
            return fail("adapter list has duplicates".into());
        }
        if let DatasetConfig::Files { dir } = &self.dataset {
            for role in ROLES {
                let p = dir.join(format!("{role}.manifest"));
                if !p.is_file() {
                    return fail(format!("dataset file {} does not exist", p.display()));
                }
            }
        }
        self.episodes.discrete().validate().at(Stage::Config)?;
        if self.episodes.test_episodes == 0 {
            return fail("test_episodes must be positive".into());
        }
        if self.episodes.pair_budgets.is_empty() {
            return fail("pair_budgets is empty".into());
        }
        if self.eval.recall.iter().chain(&self.eval.ndcg).chain(&self.eval.mpd).any(|&k| k == 0) {
            return fail("cutoffs must be positive".into());
        }
        self.pretrain.loss.validate().at(Stage::Config)?;
        for &kind in &self.adapters {
            self.adapt.resolve(kind).validate().at(Stage::Config)?;
        }
        Ok(())
    }

    /// Whether the configured generator produces pose labels; `None` for files.
    pub fn continuous_generator(&self) -> Option<bool> {
        match self.dataset {
            DatasetConfig::Continuous(_) => Some(true),
            DatasetConfig::Files { .. } => None,
            _ => Some(false),
        }
    }
}
