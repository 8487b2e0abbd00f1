//! Normal structure regularisation.
//!
//! Relations are ordered node pairs `(v, u)` anchored at a labelled normal
//! `v`. Each carries a soft normality label:
//!
//! | kind                 | `u`                       | edge `(v, u)` | label   |
//! |----------------------|---------------------------|---------------|---------|
//! | `ConnectedNormal`    | labelled normal           | present       | `1`     |
//! | `UnconnectedNormal`  | labelled normal           | absent        | `alpha` |
//! | `NormalToUnlabelled` | not labelled at all       | absent        | `0`     |
//!
//! A relation head predicts the label from the fused pair embedding
//! `h = (σ(z_v) W_r) ⊙ σ(z_u)`, trained with soft-target cross-entropy.

use std::collections::HashSet;
use std::sync::Arc;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AttributedGraph;
use crate::numeric::{sigmoid_scalar, Dense, Matrix, ParamGroup, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    ConnectedNormal,
    UnconnectedNormal,
    NormalToUnlabelled,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [
        RelationKind::ConnectedNormal,
        RelationKind::UnconnectedNormal,
        RelationKind::NormalToUnlabelled,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationSample {
    pub v: usize,
    pub u: usize,
    pub kind: RelationKind,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsrConfig {
    pub alpha: f64,
    /// Upper bound on relations per batch.
    pub batch_relations: usize,
    pub use_unconnected_normal: bool,
    /// Relative share of each relation kind in a batch.
    pub relation_mix: [f64; 3],
}

impl Default for NsrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            batch_relations: 512,
            use_unconnected_normal: true,
            relation_mix: [1.0, 1.0, 1.0],
        }
    }
}

impl NsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.relation_mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("relation_mix weights must be finite and non-negative".into()));
        }
        if self.active_kinds().is_empty() {
            return Err(Error::Config("relation_mix leaves no relation kind enabled".into()));
        }
        Ok(())
    }

    fn active_kinds(&self) -> Vec<RelationKind> {
        RelationKind::ALL
            .into_iter()
            .filter(|&k| self.relation_mix[k.index()] > 0.0)
            .filter(|&k| k != RelationKind::UnconnectedNormal || self.use_unconnected_normal)
            .collect()
    }
}

/// Membership tables for the labelled nodes of one split.
#[derive(Debug, Clone)]
pub struct LabelledSets {
    normals: Vec<usize>,
    is_normal: Vec<bool>,
    is_labelled: Vec<bool>,
    /// Nodes carrying no label at all.
    unlabelled: Vec<usize>,
    /// Ordered `(v, u)` pairs of adjacent labelled normals.
    normal_edges: Vec<(usize, usize)>,
    /// Number of edges from labelled normals into the unlabelled pool.
    normal_to_unlabelled_edges: usize,
}

impl LabelledSets {
    pub fn new(g: &AttributedGraph, labelled_normals: &[usize], labelled_anomalies: &[usize]) -> Result<Self> {
        let n = g.num_nodes();
        let mut is_normal = vec![false; n];
        let mut is_labelled = vec![false; n];
        for &v in labelled_normals.iter().chain(labelled_anomalies) {
            if v >= n {
                return Err(Error::Config(format!("labelled node {v} not in a graph of {n} nodes")));
            }
            is_labelled[v] = true;
        }
        for &v in labelled_normals {
            is_normal[v] = true;
        }
        if labelled_anomalies.iter().any(|&v| is_normal[v]) {
            return Err(Error::Config("a node is labelled both normal and anomalous".into()));
        }
        let mut normals = labelled_normals.to_vec();
        normals.sort_unstable();
        normals.dedup();
        let unlabelled = (0..n).filter(|&v| !is_labelled[v]).collect();
        let mut normal_edges = Vec::new();
        let mut normal_to_unlabelled_edges = 0;
        for &v in &normals {
            for &u in g.neighbours(v) {
                if is_normal[u] {
                    normal_edges.push((v, u));
                } else if !is_labelled[u] {
                    normal_to_unlabelled_edges += 1;
                }
            }
        }
        Ok(Self {
            normals,
            is_normal,
            is_labelled,
            unlabelled,
            normal_edges,
            normal_to_unlabelled_edges,
        })
    }

    pub fn normals(&self) -> &[usize] {
        &self.normals
    }

    pub fn is_labelled_normal(&self, v: usize) -> bool {
        self.is_normal.get(v).copied().unwrap_or(false)
    }

    pub fn is_labelled(&self, v: usize) -> bool {
        self.is_labelled.get(v).copied().unwrap_or(false)
    }

    /// Number of distinct ordered pairs of each kind.
    pub fn pool_sizes(&self) -> [usize; 3] {
        let ln = self.normals.len();
        [
            self.normal_edges.len(),
            ln * ln.saturating_sub(1) - self.normal_edges.len(),
            ln * self.unlabelled.len() - self.normal_to_unlabelled_edges,
        ]
    }
}

/// The labelling function: `1`, `alpha` or `0` for the three relation kinds.
///
/// Any other pair is outside the domain and is rejected.
pub fn label_relation(g: &AttributedGraph, v: usize, u: usize, sets: &LabelledSets, alpha: f64) -> Result<f64> {
    classify(g, v, u, sets).map(|kind| match kind {
        RelationKind::ConnectedNormal => 1.0,
        RelationKind::UnconnectedNormal => alpha,
        RelationKind::NormalToUnlabelled => 0.0,
    })
}

/// The relation kind of `(v, u)`, or a domain error.
pub fn classify(g: &AttributedGraph, v: usize, u: usize, sets: &LabelledSets) -> Result<RelationKind> {
    let reject = |reason| Err(Error::Domain { v, u, reason });
    let n = g.num_nodes();
    if v >= n || u >= n {
        return reject("node outside the graph");
    }
    if v == u {
        return reject("self pair");
    }
    if !sets.is_labelled_normal(v) {
        return reject("source is not a labelled normal");
    }
    let edge = g.has_edge(v, u);
    if sets.is_labelled_normal(u) {
        return Ok(if edge {
            RelationKind::ConnectedNormal
        } else {
            RelationKind::UnconnectedNormal
        });
    }
    if sets.is_labelled(u) {
        return reject("target is a labelled anomaly");
    }
    if edge {
        return reject("target is an unlabelled neighbour");
    }
    Ok(RelationKind::NormalToUnlabelled)
}

/// Per-kind quotas: an even split of `budget` by `relation_mix`, with the
/// first kind's shortfall passed on equally to the remaining active kinds.
fn quotas(cfg: &NsrConfig, pools: [usize; 3]) -> [usize; 3] {
    let active = cfg.active_kinds();
    let total_weight: f64 = active.iter().map(|k| cfg.relation_mix[k.index()]).sum();
    let mut quota = [0usize; 3];
    for &k in &active {
        quota[k.index()] = (cfg.batch_relations as f64 * cfg.relation_mix[k.index()] / total_weight).floor() as usize;
    }
    for (i, &k) in active.iter().enumerate() {
        let idx = k.index();
        let shortfall = quota[idx].saturating_sub(pools[idx]);
        if shortfall > 0 {
            quota[idx] = pools[idx];
            let rest = &active[i + 1..];
            if rest.is_empty() {
                break;
            }
            // Split evenly; the remainder goes to the last kind.
            let share = shortfall / rest.len();
            for (j, &r) in rest.iter().enumerate() {
                quota[r.index()] += if j + 1 == rest.len() { shortfall - share * (rest.len() - 1) } else { share };
            }
        }
    }
    quota
}

/// Uniformly draws `count` distinct pairs from a pool of `pool` candidates
/// proposed by `propose` and accepted by `valid`; small pools are enumerated.
fn draw_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    pool: usize,
    enumerate: impl FnOnce() -> Vec<(usize, usize)>,
    mut propose: impl FnMut(&mut R) -> (usize, usize),
    valid: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    if count == 0 {
        return Vec::new();
    }
    if 2 * count >= pool {
        let all = enumerate();
        debug_assert_eq!(all.len(), pool);
        let take = count.min(all.len());
        return index::sample(rng, all.len(), take).into_iter().map(|i| all[i]).collect();
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (v, u) = propose(rng);
        if valid(v, u) && seen.insert((v, u)) {
            out.push((v, u));
        }
    }
    out
}

/// Draws one relation batch.
pub fn sample_relations<R: Rng + ?Sized>(
    g: &AttributedGraph,
    sets: &LabelledSets,
    cfg: &NsrConfig,
    rng: &mut R,
) -> Result<Vec<RelationSample>> {
    cfg.validate()?;
    if sets.normals.is_empty() {
        return Err(Error::Config("relation sampling needs at least one labelled normal".into()));
    }
    let pools = sets.pool_sizes();
    let quota = quotas(cfg, pools);
    if quota[0] > 0 && pools[0] == 0 {
        warn!("no edges among labelled normals; the batch has no connected-normal relations");
    }
    let normals = &sets.normals;
    let mut out = Vec::with_capacity(quota.iter().sum());
    let mut push = |pairs: Vec<(usize, usize)>, kind: RelationKind, label: f64| {
        out.extend(pairs.into_iter().map(|(v, u)| RelationSample { v, u, kind, label }));
    };

    let connected = {
        let take = quota[0].min(pools[0]);
        index::sample(rng, pools[0], take)
            .into_iter()
            .map(|i| sets.normal_edges[i])
            .collect()
    };
    push(connected, RelationKind::ConnectedNormal, 1.0);

    let unconnected = draw_pairs(
        rng,
        quota[1],
        pools[1],
        || {
            let mut all = Vec::with_capacity(pools[1]);
            for &v in normals {
                for &u in normals {
                    if v != u && !g.has_edge(v, u) {
                        all.push((v, u));
                    }
                }
            }
            all
        },
        |rng| (normals[rng.random_range(0..normals.len())], normals[rng.random_range(0..normals.len())]),
        |v, u| v != u && !g.has_edge(v, u),
    );
    push(unconnected, RelationKind::UnconnectedNormal, cfg.alpha);

    let unlabelled = &sets.unlabelled;
    let to_unlabelled = if unlabelled.is_empty() {
        Vec::new()
    } else {
        draw_pairs(
            rng,
            quota[2],
            pools[2],
            || {
                let mut all = Vec::with_capacity(pools[2]);
                for &v in normals {
                    for &u in unlabelled {
                        if !g.has_edge(v, u) {
                            all.push((v, u));
                        }
                    }
                }
                all
            },
            |rng| (normals[rng.random_range(0..normals.len())], unlabelled[rng.random_range(0..unlabelled.len())]),
            |v, u| !g.has_edge(v, u),
        )
    };
    push(to_unlabelled, RelationKind::NormalToUnlabelled, 0.0);
    Ok(out)
}

/// Fused relation embedding `(σ(z_v) W_r) ⊙ σ(z_u)` for a single pair.
pub fn relation_embed(z_v: &[f64], z_u: &[f64], w_r: &Matrix) -> Result<Vec<f64>> {
    if z_v.len() != w_r.rows() || z_u.len() != w_r.cols() {
        return Err(Error::Shape {
            op: "relation_embed",
            left: format!("z_v {} / z_u {}", z_v.len(), z_u.len()),
            right: format!("W_r {}x{}", w_r.rows(), w_r.cols()),
        });
    }
    let sv = Matrix::row_vector(&z_v.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>());
    let projected = sv.matmul(w_r)?;
    Ok(projected
        .data()
        .iter()
        .zip(z_u)
        .map(|(&p, &x)| p * sigmoid_scalar(x))
        .collect())
}

/// Relation weight `W_r` and the relation head `F` (ReLU hidden layer,
/// sigmoid output).
#[derive(Debug, Clone, PartialEq)]
pub struct NsrHead {
    pub w_r: ParamGroup,
    pub hidden: Dense,
    pub output: Dense,
}

impl NsrHead {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            w_r: ParamGroup::new("nsr.w_r", Matrix::glorot(width, width, rng)),
            hidden: Dense::new("nsr.f1", width, width, rng),
            output: Dense::new("nsr.f2", width, 1, rng),
        }
    }

    /// Fused embeddings for rows `v_rows[i]`, `u_rows[i]` of `z`.
    /// The squashing and projection are row-wise, so they run once per
    /// distinct node before the pairs are gathered.
    pub fn embed<'a>(&'a self, tape: &mut Tape<'a>, z: Var, v_rows: Arc<Vec<usize>>, u_rows: Arc<Vec<usize>>) -> Result<Var> {
        let mut distinct: Vec<usize> = v_rows.iter().chain(u_rows.iter()).copied().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let local = |rows: &[usize]| -> Arc<Vec<usize>> {
            Arc::new(rows.iter().map(|r| distinct.binary_search(r).expect("row is present")).collect())
        };
        let (v_local, u_local) = (local(&v_rows), local(&u_rows));
        let zd = tape.gather(z, Arc::new(distinct))?;
        let squashed = tape.sigmoid(zd);
        let w = tape.param(&self.w_r);
        let projected = tape.matmul(squashed, w)?;
        let pv = tape.gather(projected, v_local)?;
        let su = tape.gather(squashed, u_local)?;
        tape.mul(pv, su)
    }

    /// Predicted normality in `(0, 1)` for each fused embedding row.
    pub fn predict<'a>(&'a self, tape: &mut Tape<'a>, h: Var) -> Result<Var> {
        let a = self.hidden.forward(tape, h)?;
        let a = tape.relu(a);
        let logit = self.output.forward(tape, a)?;
        Ok(tape.sigmoid(logit))
    }

    /// Mean soft-label cross-entropy of the relation batch described by
    /// `v_rows`, `u_rows` and `labels`.
    pub fn loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        z: Var,
        v_rows: Arc<Vec<usize>>,
        u_rows: Arc<Vec<usize>>,
        labels: Arc<Vec<f64>>,
    ) -> Result<Var> {
        if labels.is_empty() {
            warn!("empty relation batch; the regularisation term is zero");
            return Ok(tape.constant(Matrix::zeros(1, 1)));
        }
        let h = self.embed(tape, z, v_rows, u_rows)?;
        let p = self.predict(tape, h)?;
        nsr_loss(tape, p, labels)
    }

    pub fn params(&self) -> Vec<&ParamGroup> {
        let mut out = vec![&self.w_r];
        out.extend(self.hidden.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out = vec![&mut self.w_r];
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

/// Mean cross-entropy between predicted normality `probs` and soft labels.
pub fn nsr_loss(tape: &mut Tape, probs: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
    tape.bce_mean(probs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthConfig;
    use crate::numeric::{bce_scalar, grad_check, Gradients, Parameterized};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(edges: &[(usize, usize)], n: usize) -> AttributedGraph {
        AttributedGraph::from_edges(Matrix::zeros(n, 2), edges, vec![0; n]).unwrap()
    }

    #[test]
    fn two_connected_normals() {
        let g = tiny(&[(0, 1)], 2);
        let sets = LabelledSets::new(&g, &[0, 1], &[]).unwrap();
        let rel = sample_relations(&g, &sets, &NsrConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let connected: Vec<_> = rel.iter().filter(|r| r.kind == RelationKind::ConnectedNormal).collect();
        assert_eq!(connected.len(), 2);
        assert!(connected.iter().all(|r| r.label == 1.0 && (r.v, r.u) != (r.u, r.v)));
        assert_eq!(rel.len(), 2);
    }

    #[test]
    fn two_unconnected_normals() {
        let g = tiny(&[], 2);
        let sets = LabelledSets::new(&g, &[0, 1], &[]).unwrap();
        let rel = sample_relations(&g, &sets, &NsrConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rel.len(), 2);
        for r in rel {
            assert_eq!(r.kind, RelationKind::UnconnectedNormal);
            assert_eq!(r.label, 0.8);
        }
    }

    #[test]
    fn labels_per_case() {
        // 0-1 labelled normals joined; 2 labelled normal; 3 labelled anomaly; 4 unlabelled neighbour of 0; 5 unlabelled.
        let g = tiny(&[(0, 1), (0, 4), (0, 3)], 6);
        let sets = LabelledSets::new(&g, &[0, 1, 2], &[3]).unwrap();
        assert_eq!(label_relation(&g, 0, 1, &sets, 0.8).unwrap(), 1.0);
        assert_eq!(label_relation(&g, 0, 2, &sets, 0.8).unwrap(), 0.8);
        assert_eq!(label_relation(&g, 0, 5, &sets, 0.8).unwrap(), 0.0);
        for (v, u) in [(0, 3), (0, 4), (0, 0), (5, 0), (3, 0)] {
            assert!(matches!(label_relation(&g, v, u, &sets, 0.8), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn alpha_boundaries_merge_kinds() {
        let g = tiny(&[(0, 1)], 4);
        let sets = LabelledSets::new(&g, &[0, 1, 2], &[]).unwrap();
        let l = |v, u, a| label_relation(&g, v, u, &sets, a).unwrap();
        assert_eq!(l(0, 1, 1.0), l(0, 2, 1.0));
        assert_eq!(l(0, 2, 0.0), l(0, 3, 0.0));
    }

    fn check_batch(g: &AttributedGraph, sets: &LabelledSets, rel: &[RelationSample], alpha: f64) {
        let mut seen = HashSet::new();
        for r in rel {
            assert_eq!(classify(g, r.v, r.u, sets).unwrap(), r.kind);
            assert_eq!(label_relation(g, r.v, r.u, sets, alpha).unwrap(), r.label);
            assert!(seen.insert((r.kind, r.v, r.u)), "duplicate pair within a kind");
        }
    }

    #[test]
    fn every_sample_satisfies_its_predicate() {
        for seed in 0..20 {
            let g = SynthConfig::small(50).generate(seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normals: Vec<usize> = g.nodes_of_class(0).into_iter().step_by(3).take(10).collect();
            let anomalies: Vec<usize> = g.nodes_of_class(1).into_iter().take(2).collect();
            let sets = LabelledSets::new(&g, &normals, &anomalies).unwrap();
            for batch in [6, 30, 512] {
                let cfg = NsrConfig {
                    batch_relations: batch,
                    ..NsrConfig::default()
                };
                let rel = sample_relations(&g, &sets, &cfg, &mut rng).unwrap();
                check_batch(&g, &sets, &rel, cfg.alpha);
                assert!(rel.len() <= batch);
            }
        }
    }

    #[test]
    fn quotas_split_evenly_and_redistribute() {
        let cfg = NsrConfig::default();
        assert_eq!(quotas(&cfg, [1000, 1000, 1000]), [170, 170, 170]);
        // 20 connected pairs: 150 short, split 75/75.
        assert_eq!(quotas(&cfg, [20, 1000, 1000]), [20, 245, 245]);
        assert_eq!(quotas(&cfg, [0, 100, 1000]), [0, 100, 410]);
        let ablated = NsrConfig {
            use_unconnected_normal: false,
            ..cfg
        };
        assert_eq!(quotas(&ablated, [1000, 1000, 1000]), [256, 0, 256]);
        assert_eq!(quotas(&ablated, [6, 1000, 1000]), [6, 0, 506]);
    }

    #[test]
    fn ablation_skips_unconnected_normals() {
        let g = SynthConfig::small(80).generate(3).unwrap();
        let normals: Vec<usize> = g.nodes_of_class(0).into_iter().take(20).collect();
        let sets = LabelledSets::new(&g, &normals, &[]).unwrap();
        let cfg = NsrConfig {
            use_unconnected_normal: false,
            ..NsrConfig::default()
        };
        let rel = sample_relations(&g, &sets, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(rel.iter().all(|r| r.kind != RelationKind::UnconnectedNormal));
        assert!(!rel.is_empty());
    }

    #[test]
    fn relation_embed_examples() {
        let zero = vec![0.0; 4];
        let h = relation_embed(&zero, &zero, &Matrix::identity(4)).unwrap();
        assert!(h.iter().all(|&x| x == 0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zv: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zu: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(relation_embed(&zv, &zu, &Matrix::zeros(4, 4)).unwrap().iter().all(|&x| x == 0.0));
        assert!(relation_embed(&zv, &zu, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn relation_embed_matches_formula_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = NsrHead::new(6, &mut rng);
        let z = Matrix::from_vec(3, 6, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for (v, u) in [(0, 1), (2, 0), (1, 2)] {
            let direct = relation_embed(z.row(v), z.row(u), &head.w_r.value).unwrap();
            for j in 0..6 {
                let oracle: f64 = (0..6).map(|i| sig(z.get(v, i)) * head.w_r.value.get(i, j)).sum::<f64>() * sig(z.get(u, j));
                assert!((direct[j] - oracle).abs() < 1e-12);
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let h = head.embed(&mut tape, zv, Arc::new(vec![2]), Arc::new(vec![0])).unwrap();
        let direct = relation_embed(z.row(2), z.row(0), &head.w_r.value).unwrap();
        for (a, b) in tape.value(h).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Matrix::column(&[0.5]));
        let l = nsr_loss(&mut tape, p, Arc::new(vec![1.0])).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = tape.constant(Matrix::column(&[0.8]));
        let l = nsr_loss(&mut tape, p, Arc::new(vec![0.8])).unwrap();
        let oracle = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((tape.scalar(l) - oracle).abs() < 1e-12);
        assert!((oracle - 0.500402).abs() < 1e-6);

        let p = tape.constant(Matrix::column(&[0.3, 0.9]));
        let l = nsr_loss(&mut tape, p, Arc::new(vec![0.0, 0.8])).unwrap();
        let mean = (bce_scalar(0.3, 0.0) + bce_scalar(0.9, 0.8)) / 2.0;
        assert!((tape.scalar(l) - mean).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_contributes_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = NsrHead::new(4, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(2, 4));
        let l = head.loss(&mut tape, z, Arc::new(vec![]), Arc::new(vec![]), Arc::new(vec![])).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn loss_minimised_at_the_label() {
        for c in [0.0, 0.8, 1.0] {
            let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
            let best = grid
                .iter()
                .copied()
                .min_by(|&a, &b| bce_scalar(a, c).partial_cmp(&bce_scalar(b, c)).unwrap())
                .unwrap();
            let expected = c.clamp(0.001, 0.999);
            assert!((best - expected).abs() < 1.5e-3, "c = {c}: argmin {best}");
        }
    }

    /// Relation head plus a trainable embedding table standing in for the encoder.
    struct Harness {
        head: NsrHead,
        z: ParamGroup,
    }

    impl Parameterized for Harness {
        fn params(&self) -> Vec<&ParamGroup> {
            let mut p = self.head.params();
            p.push(&self.z);
            p
        }
        fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
            let mut p = self.head.params_mut();
            p.push(&mut self.z);
            p
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut h = Harness {
            head: NsrHead::new(5, &mut rng),
            z: ParamGroup::new("z", Matrix::glorot(4, 5, &mut rng).scale(3.0)),
        };
        let v_rows = Arc::new(vec![0, 1, 2, 3, 0]);
        let u_rows = Arc::new(vec![1, 2, 3, 0, 2]);
        let labels = Arc::new(vec![1.0, 0.8, 0.0, 0.8, 0.0]);
        let run = |h: &Harness| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new();
            let z = tape.param(&h.z);
            let l = h.head.loss(&mut tape, z, v_rows.clone(), u_rows.clone(), labels.clone())?;
            Ok((tape.scalar(l), tape.backward(l, 1.0)?))
        };
        let (_, grads) = run(&h).unwrap();
        let report = grad_check(&mut h, &grads, 1e-5, 1e-4, |h| Ok(run(h)?.0))
        .unwrap();
        for r in report {
            assert!(r.max_rel_error.unwrap() < 1e-4, "{r:?}");
        }
    }
}
