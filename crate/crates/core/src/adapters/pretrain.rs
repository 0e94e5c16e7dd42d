//! Conventional metric-learning training of θ on the meta-train split.

use serde::{Deserialize, Serialize};

use super::{descend, AdaptError, NetTask};
use crate::episodes::DatasetSplit;
use crate::losses::LossConfig;
use crate::network::{Architecture, EmbeddingModel, ParamGroup, RectifiedModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Classes per minibatch (class labels).
    pub classes_per_batch: usize,
    /// Instances per class in a minibatch (class labels).
    pub per_class: usize,
    /// Minibatch size (pose labels).
    pub batch_size: usize,
    pub loss: LossConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            classes_per_batch: 8,
            per_class: 4,
            batch_size: 32,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Minibatch loss at every iteration, before its update.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss of the first and last tenth of the run.
    pub fn first_and_last(&self) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n < 10 {
            return None;
        }
        let w = n / 10;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

fn minibatch(split: &DatasetSplit, cfg: &PretrainConfig, r: &mut rng::Stream) -> Result<Vec<usize>, AdaptError> {
    if split.is_continuous() {
        let all: Vec<usize> = (0..split.len()).collect();
        return Ok(rng::choose(r, &all, cfg.batch_size.min(split.len())));
    }
    let members = split.class_members();
    let eligible: Vec<usize> = members
        .iter()
        .filter(|(_, m)| m.len() >= cfg.per_class)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < 2 {
        return Err(AdaptError::Config(format!(
            "split `{}` has fewer than 2 classes with {} instances",
            split.name, cfg.per_class
        )));
    }
    let classes = rng::choose(r, &eligible, cfg.classes_per_batch.min(eligible.len()));
    Ok(classes
        .iter()
        .flat_map(|c| rng::choose(r, &members[c], cfg.per_class))
        .collect())
}

/// Trains a freshly initialized model with minibatch gradient descent.
pub fn pretrain(
    arch: &Architecture,
    split: &DatasetSplit,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EmbeddingModel<f32>, PretrainReport), AdaptError> {
    cfg.loss.validate()?;
    let mut init_rng = rng::stream(rng::substream(seed, "init"));
    let mut batch_rng = rng::stream(rng::substream(seed, "batches"));
    let mut net = RectifiedModel::plain(EmbeddingModel::new(arch.clone(), &mut init_rng)?);
    let mut wrt = net.group_ids(ParamGroup::Backbone);
    wrt.extend(net.group_ids(ParamGroup::Head));
    let mut losses = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let members = minibatch(split, cfg, &mut batch_rng)?;
        let task = NetTask::fully_labeled(split, &members, &cfg.loss, rng::child(seed, t as u64));
        let loss = descend(&mut net, &task, &wrt, 1, cfg.lr, "pretraining").map_err(|e| match e {
            AdaptError::Divergence { stage, .. } => AdaptError::Divergence { stage, iteration: t },
            other => other,
        })?;
        losses.push(loss[0]);
        if t % 100 == 0 {
            log::debug!("pretrain iteration {t}: loss {:.4}", loss[0]);
        }
    }
    Ok((net.model, PretrainReport { losses }))
}
