//! Brute-force retrieval oracles, written from the metric definitions and
//! independent of the ranking code: a gallery item's rank is one plus the
//! number of items strictly before it in (distance, id) order.

use fsml::episodes::{DatasetSplit, Label};
use fsml::rng::Stream;
use rand::Rng;

pub struct Instance {
    pub items: Vec<Vec<f32>>,
    pub ids: Vec<u64>,
    pub labels: Vec<Label>,
    pub joint_dim: usize,
}

impl Instance {
    pub fn split(&self) -> DatasetSplit {
        DatasetSplit {
            name: "oracle".into(),
            item_shape: vec![self.items[0].len()],
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            payload: self.items.iter().flatten().copied().collect(),
            joint_dim: self.joint_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.items[a].len() {
            let d = self.items[a][k] as f64 - self.items[b][k] as f64;
            s += d * d;
        }
        s
    }

    fn before(&self, q: usize, h: usize, g: usize) -> bool {
        let (dh, dg) = (self.distance(q, h), self.distance(q, g));
        dh < dg || (dh == dg && self.ids[h] < self.ids[g])
    }

    /// 1-based rank of `g` in the gallery of `q`.
    pub fn position(&self, q: usize, g: usize) -> usize {
        1 + (0..self.len()).filter(|&h| h != q && h != g && self.before(q, h, g)).count()
    }

    fn gallery(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&g| g != q)
    }

    fn relevant(&self, q: usize, g: usize) -> bool {
        self.labels[q] == self.labels[g]
    }

    pub fn label_distance(&self, a: usize, b: usize) -> f64 {
        let (Label::Pose(x), Label::Pose(y)) = (&self.labels[a], &self.labels[b]) else {
            panic!("pose labels expected")
        };
        let mut total = 0.0;
        for j in 0..x.len() / self.joint_dim {
            let mut s = 0.0;
            for c in 0..self.joint_dim {
                let d = (x[j * self.joint_dim + c] - y[j * self.joint_dim + c]) as f64;
                s += d * d;
            }
            total += s.sqrt();
        }
        total
    }

    pub fn average_precision(&self, q: usize) -> Option<f64> {
        let positives: Vec<usize> = self.gallery(q).filter(|&g| self.relevant(q, g)).collect();
        if positives.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for &p in &positives {
            let rank = self.position(q, p);
            let hits = positives.iter().filter(|&&o| self.position(q, o) <= rank).count();
            sum += hits as f64 / rank as f64;
        }
        Some(sum / positives.len() as f64)
    }

    pub fn mean_average_precision(&self) -> f64 {
        let aps: Vec<f64> = (0..self.len()).filter_map(|q| self.average_precision(q)).collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        let hits = (0..self.len())
            .filter(|&q| self.gallery(q).any(|g| self.relevant(q, g) && self.position(q, g) <= k))
            .count();
        hits as f64 / self.len() as f64
    }

    pub fn mpd_at(&self, k: usize) -> f64 {
        let total: f64 = (0..self.len())
            .map(|q| {
                self.gallery(q)
                    .filter(|&g| self.position(q, g) <= k)
                    .map(|g| self.label_distance(q, g))
                    .sum::<f64>()
                    / k as f64
            })
            .sum();
        total / self.len() as f64
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        let total: f64 = (0..self.len())
            .map(|q| {
                let d_max = self.gallery(q).map(|g| self.label_distance(q, g)).fold(0.0, f64::max);
                let rel = |g: usize| {
                    if d_max > 0.0 {
                        (1.0 - self.label_distance(q, g) / d_max).max(0.0)
                    } else {
                        0.0
                    }
                };
                let dcg: f64 = self
                    .gallery(q)
                    .filter(|&g| self.position(q, g) <= k)
                    .map(|g| rel(g) / ((self.position(q, g) + 1) as f64).log2())
                    .sum();
                let mut rels: Vec<f64> = self.gallery(q).map(rel).collect();
                rels.sort_by(|a, b| b.total_cmp(a));
                let ideal: f64 = rels.iter().take(k).enumerate().map(|(i, r)| r / ((i + 2) as f64).log2()).sum();
                if ideal == 0.0 {
                    0.0
                } else {
                    dcg / ideal
                }
            })
            .sum();
        total / self.len() as f64
    }
}

/// Random instance with at most `max_gallery + 1` items. Integer-valued
/// embeddings are mixed in so distance ties occur.
pub fn random_instance(r: &mut Stream, max_gallery: usize, continuous: bool) -> Instance {
    let n = r.random_range(2..=max_gallery + 1);
    let d = r.random_range(1..=4);
    let integer = r.random_bool(0.3);
    let items: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if integer {
                        r.random_range(-2i32..=2) as f32
                    } else {
                        r.random_range(-1.0f32..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let ids = super::shuffled_ids(r, n);
    let (labels, joint_dim) = if continuous {
        let joint_dim = r.random_range(1..=3);
        let joints = r.random_range(1..=3);
        let labels = (0..n)
            .map(|_| Label::Pose((0..joint_dim * joints).map(|_| r.random_range(-1.0f32..1.0)).collect()))
            .collect();
        (labels, joint_dim)
    } else {
        let classes = r.random_range(1..=4);
        ((0..n).map(|_| Label::Class(r.random_range(0..classes))).collect(), 1)
    };
    Instance {
        items,
        ids,
        labels,
        joint_dim,
    }
}
