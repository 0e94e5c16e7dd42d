//! Leave-one-out instance retrieval and its metrics.
//!
//! Each member of a prediction set queries the remaining members. Galleries
//! are sorted by ascending squared embedding distance (computed in `f64`),
//! ties broken by ascending instance id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::DatasetSplit;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("k = {k} exceeds the gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("retrieval needs at least 2 items, got {0}")]
    TooFew(usize),
}

/// One query's gallery in ranked order with its relevance information.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub query: usize,
    /// Gallery positions (indices into the evaluated set), nearest first.
    pub order: Vec<usize>,
    /// Same-class flags in ranked order (discrete labels).
    pub relevant: Vec<bool>,
    /// Label distances to the query in ranked order (continuous labels).
    pub label_distance: Vec<f64>,
}

/// Squared Euclidean distances between all rows of `[M, d]`, in `f64`.
pub fn distance_matrix(embeddings: &Tensor<f32>) -> Vec<f64> {
    let (m, d) = (embeddings.shape()[0], embeddings.len() / embeddings.shape()[0]);
    let rows = embeddings.data();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = rows[i * d..(i + 1) * d]
                .iter()
                .zip(&rows[j * d..(j + 1) * d])
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            out[i * m + j] = s;
            out[j * m + i] = s;
        }
    }
    out
}

/// Gallery order for `query` given a row-major `M x M` distance matrix.
pub fn rank_by_distance(distances: &[f64], ids: &[u64], query: usize) -> Vec<usize> {
    let m = ids.len();
    let row = &distances[query * m..(query + 1) * m];
    let mut order: Vec<usize> = (0..m).filter(|&j| j != query).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(ids[a].cmp(&ids[b])));
    order
}

/// Gallery order for `query` among the rows of `embeddings`.
pub fn rank(embeddings: &Tensor<f32>, ids: &[u64], query: usize) -> Vec<usize> {
    rank_by_distance(&distance_matrix(embeddings), ids, query)
}

/// Rankings of every member of `members` (indices into `split`) against the others.
pub fn rank_members(embeddings: &Tensor<f32>, split: &DatasetSplit, members: &[usize]) -> Result<Vec<RankedRetrieval>, RetrievalError> {
    let m = members.len();
    if m < 2 {
        return Err(RetrievalError::TooFew(m));
    }
    let ids: Vec<u64> = members.iter().map(|&i| split.ids[i]).collect();
    let dist = distance_matrix(embeddings);
    let continuous = split.is_continuous();
    Ok((0..m)
        .map(|q| {
            let order = rank_by_distance(&dist, &ids, q);
            let (relevant, label_distance) = if continuous {
                let d = order
                    .iter()
                    .map(|&g| split.label_distance(members[q], members[g]))
                    .collect();
                (Vec::new(), d)
            } else {
                let c = split.class_of(members[q]);
                (order.iter().map(|&g| split.class_of(members[g]) == c).collect(), Vec::new())
            };
            RankedRetrieval {
                query: q,
                order,
                relevant,
                label_distance,
            }
        })
        .collect())
}

/// Non-interpolated average precision of one ranking; `None` without positives.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAp {
    pub value: f64,
    /// Queries without any positive in their gallery.
    pub excluded: usize,
}

pub fn mean_average_precision(rankings: &[RankedRetrieval]) -> MeanAp {
    let aps: Vec<f64> = rankings.iter().filter_map(|r| average_precision(&r.relevant)).collect();
    let excluded = rankings.len() - aps.len();
    if excluded > 0 {
        log::warn!("{excluded} queries without positives excluded from mAP");
    }
    let value = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    MeanAp { value, excluded }
}

/// Fraction of queries with a positive among their `k` nearest neighbors, per `k`.
pub fn recall_at_k(rankings: &[RankedRetrieval], ks: &[usize]) -> Result<BTreeMap<usize, f64>, RetrievalError> {
    let mut out = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if rankings.iter().any(|r| k >= r.relevant.len()) {
            log::warn!("recall@{k} spans the whole gallery");
        }
        let hits = rankings
            .iter()
            .filter(|r| r.relevant.iter().take(k).any(|&x| x))
            .count();
        out.insert(k, hits as f64 / rankings.len().max(1) as f64);
    }
    Ok(out)
}

/// Mean over queries of the mean label distance of the `k` nearest neighbors.
pub fn mean_pose_distance_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut total = 0.0;
    for r in rankings {
        if k > r.label_distance.len() {
            return Err(RetrievalError::KTooLarge {
                k,
                gallery: r.label_distance.len(),
            });
        }
        total += r.label_distance[..k].iter().sum::<f64>() / k as f64;
    }
    Ok(total / rankings.len().max(1) as f64)
}

fn dcg(rel: &[f64]) -> f64 {
    rel.iter()
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k of one ranking with `rel = max(0, 1 - D / D_max)`.
pub fn ndcg_of(label_distance: &[f64], k: usize) -> f64 {
    let d_max = label_distance.iter().copied().fold(0.0, f64::max);
    let rel: Vec<f64> = label_distance
        .iter()
        .map(|d| if d_max > 0.0 { (1.0 - d / d_max).max(0.0) } else { 0.0 })
        .collect();
    let k = k.min(rel.len());
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&ideal[..k]);
    if best == 0.0 {
        0.0
    } else {
        dcg(&rel[..k]) / best
    }
}

pub fn ndcg_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let total: f64 = rankings.iter().map(|r| ndcg_of(&r.label_distance, k)).sum();
    Ok(total / rankings.len().max(1) as f64)
}

/// Cutoffs reported for each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cutoffs {
    pub recall: Vec<usize>,
    pub ndcg: Vec<usize>,
    pub mpd: Vec<usize>,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            recall: vec![1, 2, 4],
            ndcg: vec![1],
            mpd: vec![1],
        }
    }
}

/// Metrics of one evaluated episode. Discrete episodes fill `map` and
/// `recall`; continuous episodes fill `ndcg` and `mpd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub map: Option<f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mpd: BTreeMap<usize, f64>,
    pub excluded_queries: usize,
}

pub fn evaluate(embeddings: &Tensor<f32>, split: &DatasetSplit, members: &[usize], cutoffs: &Cutoffs) -> Result<EpisodeMetrics, RetrievalError> {
    let rankings = rank_members(embeddings, split, members)?;
    let mut out = EpisodeMetrics {
        map: None,
        recall: BTreeMap::new(),
        ndcg: BTreeMap::new(),
        mpd: BTreeMap::new(),
        excluded_queries: 0,
    };
    if split.is_continuous() {
        for &k in &cutoffs.ndcg {
            out.ndcg.insert(k, ndcg_at_k(&rankings, k)?);
        }
        for &k in &cutoffs.mpd {
            out.mpd.insert(k, mean_pose_distance_at_k(&rankings, k)?);
        }
    } else {
        let map = mean_average_precision(&rankings);
        out.map = Some(map.value);
        out.excluded_queries = map.excluded;
        out.recall = recall_at_k(&rankings, &cutoffs.recall)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std_err: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err }
    }
}

/// Episode means and standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub episodes: usize,
    pub map: Option<Stat>,
    pub recall_at: BTreeMap<usize, Stat>,
    pub ndcg_at: BTreeMap<usize, Stat>,
    pub mpd_at: BTreeMap<usize, Stat>,
    pub per_episode: Vec<EpisodeMetrics>,
}

impl RetrievalReport {
    pub fn from_episodes(per_episode: Vec<EpisodeMetrics>) -> Self {
        let collect = |f: &dyn Fn(&EpisodeMetrics) -> &BTreeMap<usize, f64>| {
            let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for e in &per_episode {
                for (k, v) in f(e) {
                    by_k.entry(*k).or_default().push(*v);
                }
            }
            by_k.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect::<BTreeMap<_, _>>()
        };
        let maps: Vec<f64> = per_episode.iter().filter_map(|e| e.map).collect();
        Self {
            episodes: per_episode.len(),
            map: (!maps.is_empty()).then(|| Stat::of(&maps)),
            recall_at: collect(&|e| &e.recall),
            ndcg_at: collect(&|e| &e.ndcg),
            mpd_at: collect(&|e| &e.mpd),
            per_episode,
        }
    }

    pub fn map_mean(&self) -> f64 {
        self.map.map_or(f64::NAN, |s| s.mean)
    }
}
