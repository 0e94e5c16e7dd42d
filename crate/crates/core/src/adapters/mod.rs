//! Online adaptation: SFT, first-order MAML, MTL and CRML.
//!
//! All four methods share two primitives over a [`Learner`]: plain gradient
//! descent on a subset of parameters, and the first-order meta update that
//! evaluates the outer gradient at the adapted parameters and applies it to
//! the initialization. The methods differ only in which parameters each loop
//! touches:
//!
//! | kind | inner loop | outer loop |
//! |------|------------|------------|
//! | SFT  | θ          | none       |
//! | MAML | θ          | θ₀         |
//! | MTL  | ψ          | Φ₀ and ψ₀  |
//! | CRML | Φ          | Φ₀         |

pub mod pretrain;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{DatasetSplit, Episode, EpisodeError, Sampler};
use crate::losses::{batch_loss, BatchLabels, LabeledBatch, LossConfig, LossError};
use crate::network::checkpoint::Checkpoint;
use crate::network::{EmbeddingModel, NetworkError, ParamGroup, ParamId, RectifiedModel};
use crate::retrieval::{evaluate, Cutoffs, EpisodeMetrics, RetrievalError, RetrievalReport};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("non-finite loss during {stage} at iteration {iteration}")]
    Divergence { stage: &'static str, iteration: usize },
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// The pre-trained embedding without adaptation.
    None,
    Sft,
    Maml,
    Mtl,
    Crml,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [Self::None, Self::Sft, Self::Maml, Self::Mtl, Self::Crml];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sft => "sft",
            Self::Maml => "maml",
            Self::Mtl => "mtl",
            Self::Crml => "crml",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn uses_rectifier(self) -> bool {
        matches!(self, Self::Mtl | Self::Crml)
    }

    pub fn is_meta_learned(self) -> bool {
        matches!(self, Self::Maml | Self::Mtl | Self::Crml)
    }

    /// Parameters updated on a support set.
    pub fn inner_ids(self, net: &RectifiedModel<f32>) -> Vec<ParamId> {
        match self {
            Self::None => Vec::new(),
            Self::Sft | Self::Maml => theta(net),
            Self::Mtl => net.group_ids(ParamGroup::Head),
            Self::Crml => net.group_ids(ParamGroup::Rectifier),
        }
    }

    /// Initialization parameters updated by the outer loop.
    pub fn outer_ids(self, net: &RectifiedModel<f32>) -> Vec<ParamId> {
        match self {
            Self::None | Self::Sft => Vec::new(),
            Self::Maml => theta(net),
            Self::Mtl => {
                let mut ids = net.group_ids(ParamGroup::Rectifier);
                ids.extend(net.group_ids(ParamGroup::Head));
                ids
            }
            Self::Crml => net.group_ids(ParamGroup::Rectifier),
        }
    }

    /// Parameters no stage of this method may change.
    pub fn frozen_ids(self, net: &RectifiedModel<f32>) -> Vec<ParamId> {
        let mut touched = self.inner_ids(net);
        touched.extend(self.outer_ids(net));
        net.all_ids().into_iter().filter(|id| !touched.contains(id)).collect()
    }
}

fn theta(net: &RectifiedModel<f32>) -> Vec<ParamId> {
    let mut ids = net.group_ids(ParamGroup::Backbone);
    ids.extend(net.group_ids(ParamGroup::Head));
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Inner-loop step size α.
    pub inner_lr: f64,
    /// Outer-loop step size η.
    pub outer_lr: f64,
    /// Inner steps during meta-training, and at meta-test when selection is off.
    pub inner_steps: usize,
    pub max_meta_iterations: usize,
    /// Pick the meta-test step count on the validation suite.
    pub select_steps: bool,
    /// Candidate step counts are `1..=max_selected_steps`.
    pub max_selected_steps: usize,
    pub validation_episodes: usize,
    pub loss: LossConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 5,
            max_meta_iterations: 2000,
            select_steps: true,
            max_selected_steps: 10,
            validation_episodes: 50,
            loss: LossConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: &str| Err(AdaptError::Config(m.to_string()));
        if !(self.inner_lr >= 0.0) || !(self.outer_lr >= 0.0) {
            return bad("step sizes must be non-negative");
        }
        if self.inner_steps == 0 || self.max_selected_steps == 0 {
            return bad("step counts must be positive");
        }
        if self.select_steps && self.validation_episodes == 0 {
            return bad("step selection needs validation episodes");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Something with parameters addressed by [`ParamId`] and a differentiable
/// loss per task.
pub trait Learner: Clone {
    type Task;

    /// Loss at the current parameters and its gradient with respect to each id in `wrt`.
    fn loss_and_grad(&self, task: &Self::Task, wrt: &[ParamId]) -> Result<(f64, Vec<Tensor<f32>>), AdaptError>;

    fn param_mut(&mut self, id: ParamId) -> &mut Tensor<f32>;
}

/// `steps` plain gradient-descent steps on `wrt`; returns the loss before each step.
pub fn descend<L: Learner>(
    learner: &mut L,
    task: &L::Task,
    wrt: &[ParamId],
    steps: usize,
    lr: f64,
    stage: &'static str,
) -> Result<Vec<f64>, AdaptError> {
    let mut losses = Vec::with_capacity(steps);
    for iteration in 0..steps {
        let (loss, grads) = learner.loss_and_grad(task, wrt)?;
        if !loss.is_finite() {
            return Err(AdaptError::Divergence { stage, iteration });
        }
        losses.push(loss);
        if lr != 0.0 {
            for (id, g) in wrt.iter().zip(&grads) {
                learner.param_mut(*id).descend(g, lr as f32);
            }
        }
    }
    Ok(losses)
}

/// Losses observed by one first-order meta update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaStep {
    pub support_loss: f64,
    pub prediction_loss: f64,
}

/// Adapts a copy of `init` on `support` (inner loop), then moves `outer` of
/// `init` against the prediction-loss gradient taken at the adapted copy.
#[allow(clippy::too_many_arguments)]
pub fn first_order_meta_update<L: Learner>(
    init: &mut L,
    support: &L::Task,
    prediction: &L::Task,
    inner: &[ParamId],
    outer: &[ParamId],
    steps: usize,
    alpha: f64,
    eta: f64,
    iteration: usize,
) -> Result<MetaStep, AdaptError> {
    let mut adapted = init.clone();
    let inner_losses = descend(&mut adapted, support, inner, steps, alpha, "inner loop")?;
    let (prediction_loss, grads) = adapted.loss_and_grad(prediction, outer)?;
    if !prediction_loss.is_finite() {
        return Err(AdaptError::Divergence {
            stage: "outer loop",
            iteration,
        });
    }
    if eta != 0.0 {
        for (id, g) in outer.iter().zip(&grads) {
            init.param_mut(*id).descend(g, eta as f32);
        }
    }
    Ok(MetaStep {
        support_loss: inner_losses.first().copied().unwrap_or(f64::NAN),
        prediction_loss,
    })
}

/// A labeled batch drawn from a split, with the loss to apply to it.
#[derive(Debug, Clone)]
pub struct NetTask {
    pub input: Tensor<f32>,
    pub labels: BatchLabels,
    pub loss: LossConfig,
    /// Seed for loss-internal subsampling.
    pub seed: u64,
}

impl NetTask {
    /// All labels of `members` known (class ids or every pairwise distance).
    pub fn fully_labeled(split: &DatasetSplit, members: &[usize], loss: &LossConfig, seed: u64) -> Self {
        let labels = if split.is_continuous() {
            let m = members.len();
            let mut d = Vec::with_capacity(m * m);
            for &i in members {
                for &j in members {
                    d.push((i != j).then(|| split.label_distance(i, j)));
                }
            }
            BatchLabels::Continuous(d)
        } else {
            BatchLabels::Discrete(members.iter().map(|&i| split.class_of(i).expect("class label")).collect())
        };
        Self {
            input: split.batch(members),
            labels,
            loss: loss.clone(),
            seed,
        }
    }

    /// The support set; continuous episodes expose only their labeled pairs.
    pub fn support(split: &DatasetSplit, episode: &Episode, loss: &LossConfig, seed: u64) -> Self {
        if !split.is_continuous() {
            return Self::fully_labeled(split, &episode.support, loss, seed);
        }
        let m = episode.support.len();
        let mut d = vec![None; m * m];
        for &(a, b) in &episode.support_pairs {
            let v = split.label_distance(episode.support[a], episode.support[b]);
            d[a * m + b] = Some(v);
            d[b * m + a] = Some(v);
        }
        Self {
            input: split.batch(&episode.support),
            labels: BatchLabels::Continuous(d),
            loss: loss.clone(),
            seed,
        }
    }
}

impl Learner for RectifiedModel<f32> {
    type Task = NetTask;

    fn loss_and_grad(&self, task: &NetTask, wrt: &[ParamId]) -> Result<(f64, Vec<Tensor<f32>>), AdaptError> {
        let tape = Tape::new();
        let input = tape.constant(task.input.clone());
        let fwd = self.forward(&tape, input, wrt)?;
        let batch = LabeledBatch {
            embeddings: fwd.embedding,
            labels: task.labels.clone(),
        };
        let value = batch_loss(&batch, &task.loss, task.seed)?;
        let loss = value.loss.item() as f64;
        let grads = tape.backward(value.loss)?;
        Ok((loss, fwd.params.iter().map(|(_, v)| grads.wrt(*v)).collect()))
    }

    fn param_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        RectifiedModel::param_mut(self, id).expect("parameter of this model")
    }
}

/// A method together with its (meta-)learned initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub kind: AdapterKind,
    pub model: RectifiedModel<f32>,
    /// Inner steps applied at meta-test.
    pub inner_steps: usize,
    pub history: Vec<MetaStep>,
    /// Validation score per candidate step count, when selection ran.
    pub validation: Vec<f64>,
}

impl AdapterState {
    /// The method's starting point on a pre-trained model; rectifiers start at identity.
    pub fn initial(kind: AdapterKind, pretrained: &EmbeddingModel<f32>, inner_steps: usize) -> Self {
        let model = if kind.uses_rectifier() {
            RectifiedModel::with_identity_rectifier(pretrained.clone())
        } else {
            RectifiedModel::plain(pretrained.clone())
        };
        Self {
            kind,
            model,
            inner_steps: if kind == AdapterKind::None { 0 } else { inner_steps },
            history: Vec::new(),
            validation: Vec::new(),
        }
    }

    pub fn inner_ids(&self) -> Vec<ParamId> {
        self.kind.inner_ids(&self.model)
    }

    pub fn outer_ids(&self) -> Vec<ParamId> {
        self.kind.outer_ids(&self.model)
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.model.checksum_of(&self.kind.frozen_ids(&self.model))
    }

    /// The model adapted to `episode`'s support set with `steps` inner steps.
    pub fn adapt(
        &self,
        split: &DatasetSplit,
        episode: &Episode,
        steps: usize,
        cfg: &AdaptConfig,
        seed: u64,
    ) -> Result<RectifiedModel<f32>, AdaptError> {
        let mut net = self.model.clone();
        let inner = self.inner_ids();
        if inner.is_empty() || steps == 0 || episode.support.len() < 2 {
            return Ok(net);
        }
        let task = NetTask::support(split, episode, &cfg.loss, seed);
        descend(&mut net, &task, &inner, steps, cfg.inner_lr, "adaptation")?;
        Ok(net)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.meta.insert("kind".into(), self.kind.name().into());
        ck.meta.insert("inner_steps".into(), self.inner_steps.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, AdaptError> {
        let bad = |m: &str| AdaptError::Checkpoint(m.to_string());
        let kind = ck
            .meta
            .get("kind")
            .and_then(|k| AdapterKind::parse(k))
            .ok_or_else(|| bad("missing or unknown kind tag"))?;
        let inner_steps = ck
            .meta
            .get("inner_steps")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing inner_steps"))?;
        let arch = ck.architecture()?;
        let model = ck.into_model(&arch)?;
        if model.rectifier.is_some() != kind.uses_rectifier() {
            return Err(bad("rectifier presence does not match the kind tag"));
        }
        Ok(Self {
            kind,
            model,
            inner_steps,
            history: Vec::new(),
            validation: Vec::new(),
        })
    }
}

/// Simple fine-tuning of all of θ on a support set.
pub fn sft_adapt(
    model: &EmbeddingModel<f32>,
    split: &DatasetSplit,
    episode: &Episode,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<RectifiedModel<f32>, AdaptError> {
    AdapterState::initial(AdapterKind::Sft, model, cfg.inner_steps).adapt(split, episode, cfg.inner_steps, cfg, seed)
}

/// Trains the method's initialization on meta-train episodes, then (if
/// configured) picks the meta-test step count on meta-validation episodes.
pub fn meta_train(
    kind: AdapterKind,
    pretrained: &EmbeddingModel<f32>,
    meta_train_split: &DatasetSplit,
    meta_val_split: &DatasetSplit,
    sampler: &Sampler,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdapterState, AdaptError> {
    cfg.validate()?;
    let mut state = AdapterState::initial(kind, pretrained, cfg.inner_steps);
    if kind.is_meta_learned() {
        let (inner, outer) = (state.inner_ids(), state.outer_ids());
        let train_seed = rng::substream(seed, "episodes");
        for t in 0..cfg.max_meta_iterations {
            let ep = sampler.sample(meta_train_split, rng::child(train_seed, t as u64))?;
            let task_seed = rng::child(seed, t as u64);
            let support = NetTask::support(meta_train_split, &ep, &cfg.loss, task_seed);
            let prediction = NetTask::fully_labeled(meta_train_split, &ep.prediction, &cfg.loss, task_seed);
            let step = first_order_meta_update(
                &mut state.model,
                &support,
                &prediction,
                &inner,
                &outer,
                cfg.inner_steps,
                cfg.inner_lr,
                cfg.outer_lr,
                t,
            )?;
            if t % 100 == 0 {
                log::debug!("{} meta-iteration {t}: {step:?}", kind.name());
            }
            state.history.push(step);
        }
    }
    if cfg.select_steps && kind != AdapterKind::None {
        let suite = sampler.suite(meta_val_split, cfg.validation_episodes, rng::substream(seed, "validation"))?;
        let (best, scores) = select_inner_steps(&state, meta_val_split, &suite, cfg, seed)?;
        state.inner_steps = best;
        state.validation = scores;
    }
    Ok(state)
}

pub fn maml_meta_train(
    model: &EmbeddingModel<f32>,
    meta_train_split: &DatasetSplit,
    meta_val_split: &DatasetSplit,
    sampler: &Sampler,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdapterState, AdaptError> {
    meta_train(AdapterKind::Maml, model, meta_train_split, meta_val_split, sampler, cfg, seed)
}

pub fn mtl_meta_train(
    pretrained: &EmbeddingModel<f32>,
    meta_train_split: &DatasetSplit,
    meta_val_split: &DatasetSplit,
    sampler: &Sampler,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdapterState, AdaptError> {
    meta_train(AdapterKind::Mtl, pretrained, meta_train_split, meta_val_split, sampler, cfg, seed)
}

pub fn crml_meta_train(
    pretrained: &EmbeddingModel<f32>,
    meta_train_split: &DatasetSplit,
    meta_val_split: &DatasetSplit,
    sampler: &Sampler,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdapterState, AdaptError> {
    meta_train(AdapterKind::Crml, pretrained, meta_train_split, meta_val_split, sampler, cfg, seed)
}

/// Headline score of an episode: mAP for class labels, nDCG@1 otherwise.
fn headline(m: &EpisodeMetrics) -> f64 {
    m.map.or_else(|| m.ndcg.values().next().copied()).unwrap_or(f64::NAN)
}

/// Mean validation score after each step count in `1..=max_selected_steps`;
/// returns the best count (smallest on ties) and all scores.
pub fn select_inner_steps(
    state: &AdapterState,
    split: &DatasetSplit,
    suite: &[Episode],
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<(usize, Vec<f64>), AdaptError> {
    let max = cfg.max_selected_steps;
    let inner = state.inner_ids();
    let cutoffs = Cutoffs::default();
    let per_episode: Vec<Vec<f64>> = suite
        .par_iter()
        .enumerate()
        .map(|(e, ep)| -> Result<Vec<f64>, AdaptError> {
            let task = NetTask::support(split, ep, &cfg.loss, rng::child(seed, e as u64));
            let mut net = state.model.clone();
            let mut scores = Vec::with_capacity(max);
            for _ in 0..max {
                descend(&mut net, &task, &inner, 1, cfg.inner_lr, "step selection")?;
                let emb = net.embed(&split.batch(&ep.prediction))?;
                scores.push(headline(&evaluate(&emb, split, &ep.prediction, &cutoffs)?));
            }
            Ok(scores)
        })
        .collect::<Result<_, _>>()?;
    let means: Vec<f64> = (0..max)
        .map(|s| per_episode.iter().map(|v| v[s]).sum::<f64>() / per_episode.len() as f64)
        .collect();
    let mut best = 0;
    for (s, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = s;
        }
    }
    Ok((best + 1, means))
}

/// Retrieval on each episode's prediction set before and after adapting to
/// its support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestReport {
    pub before: RetrievalReport,
    pub after: RetrievalReport,
}

/// Adapts from the state's initialization independently per episode
/// (episodes run in parallel; results keep suite order).
pub fn meta_test(
    state: &AdapterState,
    split: &DatasetSplit,
    suite: &[Episode],
    cfg: &AdaptConfig,
    cutoffs: &Cutoffs,
    seed: u64,
) -> Result<MetaTestReport, AdaptError> {
    let results: Vec<(EpisodeMetrics, EpisodeMetrics)> = suite
        .par_iter()
        .enumerate()
        .map(|(e, ep)| -> Result<_, AdaptError> {
            let pred = split.batch(&ep.prediction);
            let before = evaluate(&state.model.embed(&pred)?, split, &ep.prediction, cutoffs)?;
            let after = if state.inner_steps == 0 || ep.support.len() < 2 || state.inner_ids().is_empty() {
                before.clone()
            } else {
                let net = state.adapt(split, ep, state.inner_steps, cfg, rng::child(seed, e as u64))?;
                evaluate(&net.embed(&pred)?, split, &ep.prediction, cutoffs)?
            };
            Ok((before, after))
        })
        .collect::<Result<_, _>>()?;
    let (before, after): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(MetaTestReport {
        before: RetrievalReport::from_episodes(before),
        after: RetrievalReport::from_episodes(after),
    })
}
