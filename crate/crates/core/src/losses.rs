//! Metric-learning objectives over a batch of L2-normalized embeddings.
//!
//! Every loss is built from tape operations, so gradients flow to whichever
//! parameters produced the embeddings. Label-dependent selections (mined
//! pairs, valid triplets) are computed on values and enter the graph as
//! constant masks or gather indices.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Scalar, LOG_FLOOR};
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch of size {0} is too small; losses need at least 2 items")]
    BatchTooSmall(usize),
    #[error("{0} labels for a batch of {1} embeddings")]
    LabelCount(usize, usize),
    #[error("{loss} needs {expected} labels")]
    LabelKind { loss: &'static str, expected: &'static str },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MultiSimilarity,
    Triplet,
    LogRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_lambda: f64,
    pub ms_mining_margin: f64,
    pub triplet_margin: f64,
    /// Upper bound on log-ratio triplets per batch.
    pub log_ratio_max_triplets: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MultiSimilarity,
            ms_alpha: 2.0,
            ms_beta: 50.0,
            ms_lambda: 1.0,
            ms_mining_margin: 0.1,
            triplet_margin: 0.2,
            log_ratio_max_triplets: 512,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.to_string()));
        if !(self.ms_alpha > 0.0) || !(self.ms_beta > 0.0) {
            return bad("ms_alpha and ms_beta must be positive");
        }
        if !(self.triplet_margin >= 0.0) {
            return bad("triplet_margin must be non-negative");
        }
        if !self.ms_lambda.is_finite() || !self.ms_mining_margin.is_finite() {
            return bad("ms_lambda and ms_mining_margin must be finite");
        }
        if self.log_ratio_max_triplets == 0 {
            return bad("log_ratio_max_triplets must be positive");
        }
        Ok(())
    }
}

/// Supervision attached to a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLabels {
    Discrete(Vec<usize>),
    /// Row-major `B x B` label distances; `None` marks an unlabeled pair.
    Continuous(Vec<Option<f64>>),
}

pub struct LabeledBatch<'t, S: Scalar> {
    pub embeddings: Var<'t, S>,
    pub labels: BatchLabels,
}

/// A loss value plus whether it degenerated to zero for lack of terms.
pub struct LossValue<'t, S: Scalar> {
    pub loss: Var<'t, S>,
    pub degenerate: bool,
}

impl<'t, S: Scalar> LabeledBatch<'t, S> {
    fn size(&self) -> Result<usize, LossError> {
        let shape = self.embeddings.shape();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "loss",
                shape,
                detail: "embeddings must be [B, d]".into(),
            }
            .into());
        }
        let b = shape[0];
        if b < 2 {
            return Err(LossError::BatchTooSmall(b));
        }
        let n = match &self.labels {
            BatchLabels::Discrete(l) => l.len(),
            BatchLabels::Continuous(d) => {
                if d.len() != b * b {
                    return Err(LossError::LabelCount(d.len(), b * b));
                }
                b
            }
        };
        if n != b {
            return Err(LossError::LabelCount(n, b));
        }
        Ok(b)
    }

    fn classes(&self, loss: &'static str) -> Result<&[usize], LossError> {
        match &self.labels {
            BatchLabels::Discrete(l) => Ok(l),
            BatchLabels::Continuous(_) => Err(LossError::LabelKind {
                loss,
                expected: "discrete",
            }),
        }
    }

    /// Zero that stays attached to the graph.
    fn zero(&self) -> LossValue<'t, S> {
        LossValue {
            loss: self.embeddings.sum().scale(S::zero()),
            degenerate: true,
        }
    }
}

/// Pairs kept by multi-similarity mining, as row-major `B x B` masks
/// `(positives, negatives)`. Anchors never pair with themselves.
pub fn ms_mining(similarity: &[f64], labels: &[usize], margin: f64) -> (Vec<bool>, Vec<bool>) {
    let b = labels.len();
    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    for i in 0..b {
        let row = &similarity[i * b..(i + 1) * b];
        let mut hardest_neg = f64::NEG_INFINITY;
        let mut hardest_pos = f64::INFINITY;
        for k in (0..b).filter(|&k| k != i) {
            if labels[k] == labels[i] {
                hardest_pos = hardest_pos.min(row[k]);
            } else {
                hardest_neg = hardest_neg.max(row[k]);
            }
        }
        for k in (0..b).filter(|&k| k != i) {
            if labels[k] == labels[i] {
                pos[i * b + k] = row[k] < hardest_neg + margin;
            } else {
                neg[i * b + k] = row[k] > hardest_pos - margin;
            }
        }
    }
    (pos, neg)
}

fn mask<S: Scalar>(m: &[bool], b: usize) -> Tensor<S> {
    let data = m.iter().map(|&x| if x { S::one() } else { S::zero() }).collect();
    Tensor::new(vec![b, b], data).expect("square mask")
}

/// Multi-similarity loss averaged over anchors:
/// `(1/α) log(1 + Σ_P e^{-α(S-λ)}) + (1/β) log(1 + Σ_N e^{β(S-λ)})`
/// over the mined positive and negative pairs of each anchor.
pub fn multi_similarity_loss<'t, S: Scalar>(
    batch: &LabeledBatch<'t, S>,
    cfg: &LossConfig,
) -> Result<LossValue<'t, S>, LossError> {
    let b = batch.size()?;
    let labels = batch.classes("multi_similarity")?;
    let e = batch.embeddings;
    let sim = e.matmul(e.t()?)?;
    let sim_values: Vec<f64> = sim.value().data().iter().map(|v| v.as_f64()).collect();
    let (pos, neg) = ms_mining(&sim_values, labels, cfg.ms_mining_margin);
    if !pos.iter().chain(&neg).any(|&x| x) {
        return Ok(batch.zero());
    }
    let tape = e.tape();
    let (alpha, beta, lambda) = (cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda);
    let shifted = sim.offset(S::of(-lambda));
    let term = |scale: f64, m: &[bool]| -> Result<Var<'t, S>, LossError> {
        let masked = shifted
            .scale(S::of(scale))
            .exp()
            .mul(tape.constant(mask(m, b)))?;
        Ok(masked
            .sum_axis(1, false)?
            .offset(S::one())
            .ln()
            .scale(S::of(1.0 / scale.abs())))
    };
    let per_anchor = term(-alpha, &pos)?.add(term(beta, &neg)?)?;
    Ok(LossValue {
        loss: per_anchor.mean(),
        degenerate: false,
    })
}

/// Mean hinge `max(0, d(a,p) - d(a,n) + margin)` over all valid triplets,
/// with `d` the squared Euclidean embedding distance.
pub fn triplet_loss<'t, S: Scalar>(
    batch: &LabeledBatch<'t, S>,
    cfg: &LossConfig,
) -> Result<LossValue<'t, S>, LossError> {
    let b = batch.size()?;
    let labels = batch.classes("triplet")?;
    let (mut ap, mut an) = (Vec::new(), Vec::new());
    for a in 0..b {
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                ap.push(a * b + p);
                an.push(a * b + n);
            }
        }
    }
    if ap.is_empty() {
        return Ok(batch.zero());
    }
    let e = batch.embeddings;
    let d = e.pairwise_sq_distance(e)?;
    let hinge = d
        .gather(&ap)?
        .sub(d.gather(&an)?)?
        .offset(S::of(cfg.triplet_margin))
        .relu();
    Ok(LossValue {
        loss: hinge.mean(),
        degenerate: false,
    })
}

/// Ordered triplets `(i, j, k)`, `j != k`, whose two label distances are both
/// known and above the floor; subsampled to at most `cap` with a seeded draw.
pub fn log_ratio_triplets(distances: &[Option<f64>], b: usize, cap: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let usable = |i: usize, j: usize| i != j && distances[i * b + j].is_some_and(|d| d > LOG_FLOOR);
    let mut all = Vec::new();
    for i in 0..b {
        for j in (0..b).filter(|&j| usable(i, j)) {
            for k in (0..b).filter(|&k| k != j && usable(i, k)) {
                all.push((i, j, k));
            }
        }
    }
    if all.len() <= cap {
        return all;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|t| all[t]).collect()
}

/// Mean of `(log(d_ij/d_ik) - log(D_ij/D_ik))^2` over the given triplets,
/// where `d` is squared embedding distance and `D` label distance.
pub fn log_ratio_loss_on<'t, S: Scalar>(
    batch: &LabeledBatch<'t, S>,
    triplets: &[(usize, usize, usize)],
) -> Result<LossValue<'t, S>, LossError> {
    let b = batch.size()?;
    let BatchLabels::Continuous(dist) = &batch.labels else {
        return Err(LossError::LabelKind {
            loss: "log_ratio",
            expected: "continuous",
        });
    };
    let label = |i: usize, j: usize| dist[i * b + j].filter(|&d| d > LOG_FLOOR);
    let mut ij = Vec::with_capacity(triplets.len());
    let mut ik = Vec::with_capacity(triplets.len());
    let mut target = Vec::with_capacity(triplets.len());
    for &(i, j, k) in triplets {
        let (Some(dij), Some(dik)) = (label(i, j), label(i, k)) else {
            continue;
        };
        ij.push(i * b + j);
        ik.push(i * b + k);
        target.push(S::of(dij.ln() - dik.ln()));
    }
    if ij.is_empty() {
        return Ok(batch.zero());
    }
    let e = batch.embeddings;
    let floor = S::of(LOG_FLOOR);
    let d = e.pairwise_sq_distance(e)?;
    let log_ij = d.gather(&ij)?.clamp_min(floor).ln();
    let log_ik = d.gather(&ik)?.clamp_min(floor).ln();
    let target = e.tape().constant(Tensor::from_vec(target));
    let residual = log_ij.sub(log_ik)?.sub(target)?;
    Ok(LossValue {
        loss: residual.square().mean(),
        degenerate: false,
    })
}

/// Log-ratio loss over seeded triplets drawn by [`log_ratio_triplets`].
pub fn log_ratio_loss<'t, S: Scalar>(
    batch: &LabeledBatch<'t, S>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossValue<'t, S>, LossError> {
    let b = batch.size()?;
    let BatchLabels::Continuous(dist) = &batch.labels else {
        return Err(LossError::LabelKind {
            loss: "log_ratio",
            expected: "continuous",
        });
    };
    let triplets = log_ratio_triplets(dist, b, cfg.log_ratio_max_triplets, seed);
    log_ratio_loss_on(batch, &triplets)
}

/// Dispatches on `cfg.kind`; `seed` only affects log-ratio subsampling.
pub fn batch_loss<'t, S: Scalar>(
    batch: &LabeledBatch<'t, S>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossValue<'t, S>, LossError> {
    match cfg.kind {
        LossKind::MultiSimilarity => multi_similarity_loss(batch, cfg),
        LossKind::Triplet => triplet_loss(batch, cfg),
        LossKind::LogRatio => log_ratio_loss(batch, cfg, seed),
    }
}
