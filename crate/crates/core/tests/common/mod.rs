//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

pub mod gradcheck;
pub mod metrics;

use fsml::episodes::{DatasetSplit, Label};
use fsml::rng::{self, Stream};
use fsml::tensor::Tensor;
use rand::Rng;

pub fn stream(seed: u64) -> Stream {
    rng::stream(seed)
}

pub fn randn(r: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// A class-labeled split of vector items.
pub fn class_split(items: &[Vec<f32>], classes: &[usize], ids: &[u64]) -> DatasetSplit {
    DatasetSplit {
        name: "oracle".into(),
        item_shape: vec![items[0].len()],
        ids: ids.to_vec(),
        labels: classes.iter().map(|&c| Label::Class(c)).collect(),
        payload: items.iter().flatten().copied().collect(),
        joint_dim: 1,
    }
}

/// Gaussian clusters, `per_class` items per class, ids in order.
pub fn cluster_split(r: &mut Stream, classes: usize, per_class: usize, dim: usize, spread: f64) -> DatasetSplit {
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| randn(r, &[dim]).into_data())
        .collect();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let noise = randn(r, &[dim]);
            items.push(center.iter().zip(noise.data()).map(|(m, n)| (m + spread * n) as f32).collect());
            labels.push(c);
        }
    }
    let ids: Vec<u64> = (0..items.len() as u64).collect();
    class_split(&items, &labels, &ids)
}

/// Distinct ids in random order.
pub fn shuffled_ids(r: &mut Stream, n: usize) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + r.random_range(0..7)).collect();
    rng::partial_shuffle(r, &mut ids, n);
    ids
}
