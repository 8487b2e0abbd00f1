use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{auc_pr, auc_roc};
use super::split::OpenSetSplit;
use crate::error::Result;
use crate::graph::AttributedGraph;

/// Anything that maps nodes of a graph to anomaly scores (higher = more anomalous).
pub trait NodeScorer {
    fn score_nodes(&self, g: &AttributedGraph, nodes: &[usize]) -> Result<Vec<f64>>;
}

/// Metrics of one trained detector on one rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub rotation: usize,
    pub seen_class: u32,
    pub seed: u64,
    pub auc_roc_all: f64,
    pub auc_pr_all: f64,
    pub auc_roc_unseen: f64,
    pub auc_pr_unseen: f64,
}

/// Scores the "all" and "unseen" test sets of `split` and computes the four metrics.
pub fn evaluate<S: NodeScorer + ?Sized>(
    scorer: &S,
    g: &AttributedGraph,
    split: &OpenSetSplit,
    rotation: usize,
    seed: u64,
) -> Result<EvalRow> {
    let all = scorer.score_nodes(g, &split.test_all)?;
    let all_labels: Vec<bool> = split.test_all.iter().map(|&v| g.is_anomaly(v)).collect();
    let unseen = scorer.score_nodes(g, &split.test_unseen)?;
    let unseen_labels: Vec<bool> = split.test_unseen.iter().map(|&v| g.is_anomaly(v)).collect();
    Ok(EvalRow {
        rotation,
        seen_class: split.seen_class,
        seed,
        auc_roc_all: auc_roc(&all, &all_labels)?,
        auc_pr_all: auc_pr(&all, &all_labels)?,
        auc_roc_unseen: auc_roc(&unseen, &unseen_labels)?,
        auc_pr_unseen: auc_pr(&unseen, &unseen_labels)?,
    })
}

/// Mean and (sample) standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Omitted with fewer than two seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc_roc_all: MeanStd,
    pub auc_pr_all: MeanStd,
    pub auc_roc_unseen: MeanStd,
    pub auc_pr_unseen: MeanStd,
    pub seeds: usize,
}

impl Aggregate {
    fn from_rows<'a>(rows: impl IntoIterator<Item = &'a EvalRow> + Clone) -> Self {
        let collect = |f: fn(&EvalRow) -> f64| rows.clone().into_iter().map(f).collect::<Vec<_>>();
        let roc_all = collect(|r| r.auc_roc_all);
        Self {
            seeds: roc_all.len(),
            auc_roc_all: MeanStd::of(&roc_all),
            auc_pr_all: MeanStd::of(&collect(|r| r.auc_pr_all)),
            auc_roc_unseen: MeanStd::of(&collect(|r| r.auc_roc_unseen)),
            auc_pr_unseen: MeanStd::of(&collect(|r| r.auc_pr_unseen)),
        }
    }
}

/// Rows for every (rotation, seed) plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per rotation: mean ± std over seeds.
    pub per_rotation: BTreeMap<usize, Aggregate>,
    /// Mean ± std over seeds of the rotation-averaged metrics.
    pub overall: Aggregate,
    /// How labelled normals were drawn.
    pub labelled_normals: String,
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by_key(|r| (r.rotation, r.seed));
        let mut per_rotation = BTreeMap::new();
        let rotations: Vec<usize> = {
            let mut r: Vec<usize> = rows.iter().map(|r| r.rotation).collect();
            r.dedup();
            r
        };
        for &rot in &rotations {
            let subset: Vec<&EvalRow> = rows.iter().filter(|r| r.rotation == rot).collect();
            per_rotation.insert(rot, Aggregate::from_rows(subset.iter().copied()));
        }
        // Average over rotations per seed, then aggregate over seeds.
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let seed_means: Vec<EvalRow> = seeds
            .iter()
            .map(|&seed| {
                let subset: Vec<&EvalRow> = rows.iter().filter(|r| r.seed == seed).collect();
                let k = subset.len() as f64;
                let avg = |f: fn(&EvalRow) -> f64| subset.iter().map(|r| f(r)).sum::<f64>() / k;
                EvalRow {
                    rotation: usize::MAX,
                    seen_class: 0,
                    seed,
                    auc_roc_all: avg(|r| r.auc_roc_all),
                    auc_pr_all: avg(|r| r.auc_pr_all),
                    auc_roc_unseen: avg(|r| r.auc_roc_unseen),
                    auc_pr_unseen: avg(|r| r.auc_pr_unseen),
                }
            })
            .collect();
        Self {
            overall: Aggregate::from_rows(seed_means.iter()),
            per_rotation,
            rows,
            labelled_normals: "resampled per (rotation, seed)".into(),
        }
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        crate::canonical_json(self)
    }

    /// One row per (rotation, seed), then `mean`/`std` rows per rotation and overall.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,rotation,seen_class,seed,auc_roc_all,auc_pr_all,auc_roc_unseen,auc_pr_unseen\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "run,{},{},{},{},{},{},{}",
                r.rotation, r.seen_class, r.seed, r.auc_roc_all, r.auc_pr_all, r.auc_roc_unseen, r.auc_pr_unseen
            );
        }
        let mut agg_rows = |rotation: &str, a: &Aggregate| {
            let _ = writeln!(
                out,
                "mean,{rotation},,,{},{},{},{}",
                a.auc_roc_all.mean, a.auc_pr_all.mean, a.auc_roc_unseen.mean, a.auc_pr_unseen.mean
            );
            if let (Some(a1), Some(a2), Some(a3), Some(a4)) = (
                a.auc_roc_all.std,
                a.auc_pr_all.std,
                a.auc_roc_unseen.std,
                a.auc_pr_unseen.std,
            ) {
                let _ = writeln!(out, "std,{rotation},,,{a1},{a2},{a3},{a4}");
            }
        };
        for (rot, a) in &self.per_rotation {
            agg_rows(&rot.to_string(), a);
        }
        agg_rows("all", &self.overall);
        out
    }
}
