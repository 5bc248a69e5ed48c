//! One-dimensional isolation forest trained on clean models only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FeatureTable, Ranking};
use crate::error::{Error, Result};
use crate::synth::derive_seed;

pub const DEFAULT_SEED: u64 = 42;
pub const TREES: usize = 100;
pub const MAX_SUBSAMPLE: usize = 256;
pub const MIN_CLEANS: usize = 8;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const IFOREST_STREAM: u64 = 0x1F0;

/// Average unsuccessful-search path length in a binary search tree of `n` nodes.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        at: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

fn grow(values: &mut [f64], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Node {
    if depth >= limit || values.len() <= 1 {
        return Node::Leaf { size: values.len() };
    }
    let (lo, hi) = crate::stats::min_max(values);
    if lo == hi {
        return Node::Leaf { size: values.len() };
    }
    let at = rng.random_range(lo..hi);
    let mut split = 0;
    for i in 0..values.len() {
        if values[i] < at {
            values.swap(i, split);
            split += 1;
        }
    }
    let (l, r) = values.split_at_mut(split);
    Node::Split {
        at,
        left: Box::new(grow(l, depth + 1, limit, rng)),
        right: Box::new(grow(r, depth + 1, limit, rng)),
    }
}

fn path_length(node: &Node, x: f64, depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + average_path_length(*size),
        Node::Split { at, left, right } => {
            path_length(if x < *at { left } else { right }, x, depth + 1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct IsolationForest1d {
    trees: Vec<Node>,
    subsample: usize,
}

impl IsolationForest1d {
    /// Grows `TREES` trees on subsamples of `min(256, len)` training values.
    pub fn fit(train: &[f64], seed: u64) -> Self {
        let subsample = train.len().min(MAX_SUBSAMPLE);
        let limit = (subsample.max(2) as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..TREES)
            .map(|_| {
                let mut sample: Vec<f64> =
                    rand::seq::index::sample(&mut rng, train.len(), subsample)
                        .into_iter()
                        .map(|i| train[i])
                        .collect();
                grow(&mut sample, 0, limit, &mut rng)
            })
            .collect();
        Self { trees, subsample }
    }

    /// Anomaly score in (0, 1]; larger is more anomalous.
    pub fn score(&self, x: f64) -> f64 {
        let c = average_path_length(self.subsample);
        if c == 0.0 {
            return 0.5;
        }
        let mean_depth =
            self.trees.iter().map(|t| path_length(t, x, 0)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean_depth / c)
    }
}

/// Ranks features by mean backdoor anomaly score minus mean clean anomaly
/// score under a forest fit on the clean rows.
pub fn rank_by_iforest(table: &FeatureTable, seed: u64) -> Result<Ranking> {
    table.require_both_labels()?;
    let cleans = table.labels.iter().filter(|&&l| !l).count();
    if cleans < MIN_CLEANS {
        return Err(Error::TooFewCleans {
            found: cleans,
            required: MIN_CLEANS,
        });
    }
    let scores = (0..table.n_features())
        .into_par_iter()
        .map(|j| {
            let col = table.column(j);
            if crate::stats::is_constant(&col) {
                return 0.0;
            }
            let train: Vec<f64> = col
                .iter()
                .zip(&table.labels)
                .filter(|(_, &l)| !l)
                .map(|(v, _)| *v)
                .collect();
            let forest =
                IsolationForest1d::fit(&train, derive_seed(seed, IFOREST_STREAM, j as u64));
            let (mut sum, mut cnt) = ([0.0; 2], [0usize; 2]);
            for (v, &l) in col.iter().zip(&table.labels) {
                sum[usize::from(l)] += forest.score(*v);
                cnt[usize::from(l)] += 1;
            }
            sum[1] / cnt[1] as f64 - sum[0] / cnt[0] as f64
        })
        .collect();
    Ok(Ranking::from_scores(scores))
}
