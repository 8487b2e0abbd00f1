//! Synthetic attributed graphs with planted anomaly classes.
//!
//! Normal nodes are split into communities with their own feature means and
//! dense internal wiring. Each anomaly class is shifted along its own block
//! of feature dimensions, is wired sparsely to the normal nodes and more
//! densely within the class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttributedGraph, NORMAL_CLASS};
use crate::error::{Error, Result};
use crate::eval::auc_roc;
use crate::numeric::{sigmoid_scalar, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub normal_communities: usize,
    pub n_anomaly_classes: usize,
    pub n_anomaly_per_class: usize,
    pub feature_dim: usize,
    /// Mean shift of each anomaly class along its own feature block.
    /// Shorter than `n_anomaly_classes` repeats the last entry.
    pub anomaly_offsets: Vec<f64>,
    /// Standard deviation of the community feature means.
    pub community_offset: f64,
    pub feature_noise: f64,
    /// Edge probability inside a normal community.
    pub p_nn: f64,
    /// Edge probability between different normal communities.
    pub p_nn_cross: f64,
    /// Edge probability between a normal and an anomaly node.
    pub p_na: f64,
    /// Edge probability inside one anomaly class.
    pub p_aa: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 2000,
            normal_communities: 4,
            n_anomaly_classes: 2,
            n_anomaly_per_class: 100,
            feature_dim: 16,
            anomaly_offsets: vec![4.0],
            community_offset: 1.25,
            feature_noise: 1.0,
            p_nn: 0.02,
            p_nn_cross: 0.001,
            p_na: 0.001,
            p_aa: 0.05,
        }
    }
}

impl SynthConfig {
    /// A config with roughly `n` nodes and denser wiring, for tests.
    pub fn small(n: usize) -> Self {
        let per_class = (n / 20).max(1);
        Self {
            n_normal: n.saturating_sub(2 * per_class).max(1),
            n_anomaly_per_class: per_class,
            p_nn: (8.0 / (n as f64 / 4.0)).min(1.0),
            p_nn_cross: 0.01,
            p_na: 0.005,
            p_aa: 0.3,
            ..Self::default()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n_normal + self.n_anomaly_classes * self.n_anomaly_per_class
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_nn", self.p_nn),
            ("p_nn_cross", self.p_nn_cross),
            ("p_na", self.p_na),
            ("p_aa", self.p_aa),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_na > 0.0 && self.p_na >= self.p_nn {
            return Err(Error::Config(format!(
                "p_na ({}) must be below p_nn ({})",
                self.p_na, self.p_nn
            )));
        }
        if self.n_anomaly_classes < 2 {
            return Err(Error::Config("at least two anomaly classes are required".into()));
        }
        if self.feature_dim == 0 || self.n_normal == 0 || self.normal_communities == 0 {
            return Err(Error::Config("feature_dim, n_normal and normal_communities must be positive".into()));
        }
        if self.anomaly_offsets.is_empty() {
            return Err(Error::Config("anomaly_offsets must not be empty".into()));
        }
        if !(self.feature_noise >= 0.0 && self.community_offset >= 0.0) {
            return Err(Error::Config("feature_noise and community_offset must be non-negative".into()));
        }
        Ok(())
    }

    fn offset(&self, class: usize) -> f64 {
        let i = class.min(self.anomaly_offsets.len() - 1);
        self.anomaly_offsets[i]
    }

    /// Width of each anomaly class's feature block; the remaining trailing
    /// dimensions carry the community means.
    fn block_width(&self) -> usize {
        (self.feature_dim / (self.n_anomaly_classes + 1)).max(1)
    }

    /// Generates the graph. Bit-deterministic in `(self, seed)`; features
    /// are rounded to f32 precision so every file format round-trips.
    pub fn generate(&self, seed: u64) -> Result<AttributedGraph> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.num_nodes();
        let d = self.feature_dim;
        let b = self.block_width();
        let shared_start = (self.n_anomaly_classes * b).min(d);

        // Community of each normal node (balanced, then shuffled).
        let mut community: Vec<usize> = (0..self.n_normal).map(|i| i % self.normal_communities).collect();
        community.shuffle(&mut rng);
        let community_means: Vec<Vec<f64>> = (0..self.normal_communities)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        if j >= shared_start {
                            z * self.community_offset
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();

        let mut node_class = vec![NORMAL_CLASS; n];
        // Group id used for wiring: communities first, then anomaly classes.
        let mut group = vec![0usize; n];
        for (v, &c) in community.iter().enumerate() {
            group[v] = c;
        }
        for k in 0..self.n_anomaly_classes {
            for i in 0..self.n_anomaly_per_class {
                let v = self.n_normal + k * self.n_anomaly_per_class + i;
                node_class[v] = k as u32 + 1;
                group[v] = self.normal_communities + k;
            }
        }

        let mut data = Vec::with_capacity(n * d);
        for v in 0..n {
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                let mut x = noise * self.feature_noise;
                if v < self.n_normal {
                    x += community_means[community[v]][j];
                } else {
                    let k = node_class[v] as usize - 1;
                    let lo = k * b;
                    if j >= lo && j < (lo + b).min(d) {
                        x += self.offset(k) / (b as f64).sqrt();
                    }
                }
                data.push(x as f32 as f64);
            }
        }
        let features = Matrix::from_vec(n, d, data)?;

        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let p = self.edge_probability(u, v, &group);
                if p > 0.0 && rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        AttributedGraph::from_edges(features, &edges, node_class)
    }

    fn edge_probability(&self, u: usize, v: usize, group: &[usize]) -> f64 {
        let u_normal = u < self.n_normal;
        let v_normal = v < self.n_normal;
        match (u_normal, v_normal) {
            (true, true) if group[u] == group[v] => self.p_nn,
            (true, true) => self.p_nn_cross,
            (false, false) if group[u] == group[v] => self.p_aa,
            (false, false) => self.p_na,
            _ => self.p_na,
        }
    }
}

/// Held-out AUC-ROC of a logistic regression on raw (standardised)
/// features with every anomaly class labelled. A certificate that the
/// anomaly classes are separable from features alone.
pub fn separability_auc(g: &AttributedGraph, seed: u64) -> Result<f64> {
    let n = g.num_nodes();
    let d = g.feature_dim();
    let x = g.features();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in std.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let standardise = |r: usize| -> Vec<f64> {
        x.row(r)
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n / 2);
    let y = |v: usize| if g.is_anomaly(v) { 1.0 } else { 0.0 };

    // Class-balanced full-batch gradient descent.
    let positives = train.iter().filter(|&&v| g.is_anomaly(v)).count().max(1) as f64;
    let negatives = (train.len() as f64 - positives).max(1.0);
    let rows: Vec<Vec<f64>> = train.iter().map(|&v| standardise(v)).collect();
    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &v) in rows.iter().zip(train) {
            let z = bias + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let weight = if g.is_anomaly(v) { 0.5 / positives } else { 0.5 / negatives };
            let err = (sigmoid_scalar(z) - y(v)) * weight;
            gb += err;
            for (gj, xj) in gw.iter_mut().zip(row) {
                *gj += err * xj;
            }
        }
        bias -= 1.0 * gb;
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= 1.0 * (gj + 1e-4 * *wj);
        }
    }
    let scores: Vec<f64> = test
        .iter()
        .map(|&v| bias + standardise(v).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let labels: Vec<bool> = test.iter().map(|&v| g.is_anomaly(v)).collect();
    auc_roc(&scores, &labels)
}
