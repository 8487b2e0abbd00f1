//! Open-set evaluation: seen/unseen rotations, k-means class splitting,
//! ranking metrics and report aggregation.

mod kmeans;
mod metrics;
mod report;
mod split;

pub use kmeans::{inertia, kmeans_split, KMeansResult, MAX_ITERATIONS as KMEANS_MAX_ITERATIONS};
pub use metrics::{auc_pr, auc_roc};
pub use report::{evaluate, Aggregate, EvalReport, EvalRow, MeanStd, NodeScorer};
pub use split::{make_rotations, make_split, OpenSetSplit, SplitConfig};

use crate::error::Result;
use crate::graph::AttributedGraph;
use crate::numeric::Matrix;

/// Re-labels the anomaly nodes of `g` into `k` classes by clustering
/// `embeddings` (one row per anomaly node, in node-id order, or one row per
/// node of the graph).
pub fn split_anomaly_class(g: &AttributedGraph, embeddings: &Matrix, k: usize, seed: u64) -> Result<AttributedGraph> {
    let anomalies: Vec<usize> = (0..g.num_nodes()).filter(|&v| g.is_anomaly(v)).collect();
    let points = if embeddings.rows() == g.num_nodes() {
        embeddings.select_rows(&anomalies)
    } else if embeddings.rows() == anomalies.len() {
        embeddings.clone()
    } else {
        return Err(crate::Error::Shape {
            op: "split_anomaly_class",
            left: format!("{} embedding rows", embeddings.rows()),
            right: format!("{} nodes / {} anomalies", g.num_nodes(), anomalies.len()),
        });
    };
    let result = kmeans_split(&points, k, seed)?;
    let classes: Vec<u32> = result.assignment.iter().map(|&c| c as u32 + 1).collect();
    g.with_anomaly_classes(&classes)
}
