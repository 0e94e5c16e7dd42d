//! Dataset splits and episodic sampling.
//!
//! A discrete episode draws `N` classes uniformly without replacement, then
//! `K + K'` instances of each class without replacement; the first `K` go to
//! the support set, the rest to the prediction set. A continuous episode
//! reserves a prediction pool first and then draws labeled support pairs
//! from the remaining instances.

pub mod file;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("invalid episode spec: {0}")]
    Spec(String),
    #[error("split `{split}` has {eligible} classes with at least {needed} instances; {way} required")]
    InsufficientClasses {
        split: String,
        eligible: usize,
        needed: usize,
        way: usize,
    },
    #[error("class {class} of split `{split}` has {have} instances; {needed} required")]
    DeficientClass {
        split: String,
        class: usize,
        have: usize,
        needed: usize,
    },
    #[error("pair budget {budget} exceeds the {available} available pairs")]
    PairBudget { budget: usize, available: usize },
    #[error("split `{0}` does not carry {1} labels")]
    LabelMode(String, &'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Concatenated joint coordinates.
    Pose(Vec<f32>),
}

/// Sum over joints of the Euclidean distance between corresponding joints.
pub fn pose_distance(a: &[f32], b: &[f32], joint_dim: usize) -> f64 {
    a.chunks(joint_dim)
        .zip(b.chunks(joint_dim))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Instances of one split: payload rows, global ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub item_shape: Vec<usize>,
    pub ids: Vec<u64>,
    pub labels: Vec<Label>,
    /// Row-major payloads, `len() * item_len()` values.
    pub payload: Vec<f32>,
    /// Coordinates per joint of pose labels.
    pub joint_dim: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.labels.first(), Some(Label::Pose(_)))
    }

    pub fn item(&self, index: usize) -> &[f32] {
        let n = self.item_len();
        &self.payload[index * n..(index + 1) * n]
    }

    /// Payloads of `indices` stacked into `[m, ...item_shape]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.item_shape);
        Tensor::new(shape, data).expect("non-empty batch of well-formed items")
    }

    pub fn class_of(&self, index: usize) -> Option<usize> {
        match self.labels[index] {
            Label::Class(c) => Some(c),
            Label::Pose(_) => None,
        }
    }

    /// Member indices per class, in index order.
    pub fn class_members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Label::Class(c) = l {
                members.entry(*c).or_default().push(i);
            }
        }
        members
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.class_members().into_keys().collect()
    }

    /// Label distance between two pose-labeled instances.
    pub fn label_distance(&self, i: usize, j: usize) -> f64 {
        match (&self.labels[i], &self.labels[j]) {
            (Label::Pose(a), Label::Pose(b)) => pose_distance(a, b, self.joint_dim),
            _ => panic!("label distance needs pose labels"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    /// Prediction instances per class.
    pub query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            query: 15,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(EpisodeError::Spec(format!(
                "need way >= 2, shot >= 1, query >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn prediction_size(&self) -> usize {
        self.way * self.query
    }
}

/// Support and prediction members as indices into the source split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Sampled classes in draw order (empty for continuous episodes).
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub prediction: Vec<usize>,
    /// Labeled pairs as positions within `support` (continuous episodes only).
    pub support_pairs: Vec<(usize, usize)>,
}

pub fn sample_episode(split: &DatasetSplit, spec: &EpisodeSpec, seed: u64) -> Result<Episode, EpisodeError> {
    spec.validate()?;
    if split.is_continuous() {
        return Err(EpisodeError::LabelMode(split.name.clone(), "class"));
    }
    let needed = spec.shot + spec.query;
    let members = split.class_members();
    let eligible: Vec<usize> = members
        .iter()
        .filter(|(_, m)| m.len() >= needed)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < spec.way {
        if let Some((class, m)) = members.iter().find(|(_, m)| m.len() < needed) {
            return Err(EpisodeError::DeficientClass {
                split: split.name.clone(),
                class: *class,
                have: m.len(),
                needed,
            });
        }
        return Err(EpisodeError::InsufficientClasses {
            split: split.name.clone(),
            eligible: eligible.len(),
            needed,
            way: spec.way,
        });
    }
    let mut r = rng::stream(seed);
    let classes = rng::choose(&mut r, &eligible, spec.way);
    let mut support = Vec::with_capacity(spec.way * spec.shot);
    let mut prediction = Vec::with_capacity(spec.prediction_size());
    for c in &classes {
        let picked = rng::choose(&mut r, &members[c], needed);
        support.extend_from_slice(&picked[..spec.shot]);
        prediction.extend_from_slice(&picked[spec.shot..]);
    }
    Ok(Episode {
        classes,
        support,
        prediction,
        support_pairs: Vec::new(),
    })
}

/// `count` episodes; episode `i` is sampled with seed `child(seed, i)`.
pub fn make_meta_test_suite(
    split: &DatasetSplit,
    spec: &EpisodeSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>, EpisodeError> {
    (0..count)
        .map(|i| sample_episode(split, spec, rng::child(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousSpec {
    /// Size of the prediction pool.
    pub prediction: usize,
    /// Partners per anchor when drawing labeled pairs.
    pub partners: usize,
}

impl Default for ContinuousSpec {
    fn default() -> Self {
        Self {
            prediction: 60,
            partners: 5,
        }
    }
}

/// Continuous episode with `pair_budget` labeled support pairs.
///
/// The split is shuffled once; the first `spec.prediction` instances form the
/// prediction pool. Pairs are drawn as stars over the remaining instances in
/// shuffled order: each anchor is paired with the next `spec.partners`
/// unused instances. When fresh instances run out, unused pairs among the
/// remaining instances are drawn uniformly. For one seed, the pairs of a
/// smaller budget are a prefix of those of a larger one.
pub fn sample_continuous_episode(
    split: &DatasetSplit,
    pair_budget: usize,
    spec: &ContinuousSpec,
    seed: u64,
) -> Result<Episode, EpisodeError> {
    if !split.is_continuous() {
        return Err(EpisodeError::LabelMode(split.name.clone(), "pose"));
    }
    if spec.partners == 0 || spec.prediction < 2 || spec.prediction >= split.len() {
        return Err(EpisodeError::Spec(format!(
            "need partners >= 1 and 2 <= prediction < {}; got {spec:?}",
            split.len()
        )));
    }
    let mut r = rng::stream(seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let n = order.len();
    rng::partial_shuffle(&mut r, &mut order, n);
    let (pool, rest) = order.split_at(spec.prediction);
    let available = rest.len() * (rest.len() - 1) / 2;
    if pair_budget > available {
        return Err(EpisodeError::PairBudget {
            budget: pair_budget,
            available,
        });
    }

    // Pairs as positions into `rest`.
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(pair_budget);
    let mut next = 0;
    while pairs.len() < pair_budget && next + 1 < rest.len() {
        let anchor = next;
        let group_end = (anchor + 1 + spec.partners).min(rest.len());
        for partner in anchor + 1..group_end {
            if pairs.len() == pair_budget {
                break;
            }
            pairs.push((anchor, partner));
        }
        next = group_end;
    }
    if pairs.len() < pair_budget {
        let taken: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
        let mut free: Vec<(usize, usize)> = (0..rest.len())
            .flat_map(|i| (i + 1..rest.len()).map(move |j| (i, j)))
            .filter(|p| !taken.contains(p))
            .collect();
        let extra = pair_budget - pairs.len();
        rng::partial_shuffle(&mut r, &mut free, extra);
        pairs.extend_from_slice(&free[..extra]);
    }

    let mut position = BTreeMap::new();
    let mut support = Vec::new();
    let mut support_pairs = Vec::with_capacity(pairs.len());
    let mut slot = |i: usize, support: &mut Vec<usize>| {
        *position.entry(i).or_insert_with(|| {
            support.push(rest[i]);
            support.len() - 1
        })
    };
    for (a, b) in pairs {
        let pa = slot(a, &mut support);
        let pb = slot(b, &mut support);
        support_pairs.push((pa, pb));
    }
    Ok(Episode {
        classes: Vec::new(),
        support,
        prediction: pool.to_vec(),
        support_pairs,
    })
}

/// How episodes are drawn from a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Discrete(EpisodeSpec),
    Continuous { pair_budget: usize, spec: ContinuousSpec },
}

impl Sampler {
    pub fn sample(&self, split: &DatasetSplit, seed: u64) -> Result<Episode, EpisodeError> {
        match self {
            Self::Discrete(spec) => sample_episode(split, spec, seed),
            Self::Continuous { pair_budget, spec } => sample_continuous_episode(split, *pair_budget, spec, seed),
        }
    }

    /// `count` episodes; episode `i` is sampled with seed `child(seed, i)`.
    pub fn suite(&self, split: &DatasetSplit, count: usize, seed: u64) -> Result<Vec<Episode>, EpisodeError> {
        (0..count).map(|i| self.sample(split, rng::child(seed, i as u64))).collect()
    }
}

/// Checks the structural invariants of a discrete episode.
pub fn check_episode(split: &DatasetSplit, spec: &EpisodeSpec, ep: &Episode) -> Result<(), String> {
    if ep.support.len() != spec.way * spec.shot || ep.prediction.len() != spec.prediction_size() {
        return Err(format!(
            "sizes {}/{} for spec {spec:?}",
            ep.support.len(),
            ep.prediction.len()
        ));
    }
    let support_ids: BTreeSet<u64> = ep.support.iter().map(|&i| split.ids[i]).collect();
    let prediction_ids: BTreeSet<u64> = ep.prediction.iter().map(|&i| split.ids[i]).collect();
    if support_ids.len() != ep.support.len() || prediction_ids.len() != ep.prediction.len() {
        return Err("repeated instance".into());
    }
    if !support_ids.is_disjoint(&prediction_ids) {
        return Err("support and prediction overlap".into());
    }
    let classes: BTreeSet<usize> = ep.classes.iter().copied().collect();
    if classes.len() != spec.way {
        return Err("repeated class".into());
    }
    for c in &classes {
        let count = |set: &[usize]| set.iter().filter(|&&i| split.class_of(i) == Some(*c)).count();
        if count(&ep.support) != spec.shot || count(&ep.prediction) != spec.query {
            return Err(format!("class {c} has wrong per-class counts"));
        }
    }
    Ok(())
}

/// Checks that the class sets of the given splits are pairwise disjoint.
pub fn check_disjoint_classes(splits: &[&DatasetSplit]) -> Result<(), String> {
    for (a, sa) in splits.iter().enumerate() {
        for sb in &splits[a + 1..] {
            let common: Vec<usize> = sa.classes().intersection(&sb.classes()).copied().collect();
            if !common.is_empty() {
                return Err(format!("splits `{}` and `{}` share classes {common:?}", sa.name, sb.name));
            }
        }
    }
    Ok(())
}
