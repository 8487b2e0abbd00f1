//! Joint training of a detector's scoring loss and the relation loss.
//!
//! Each step draws a batch of labelled normals together with every labelled
//! anomaly, a relation batch anchored at labelled normals, and one
//! neighbourhood sample covering all nodes involved. Both losses are batch
//! means; their sum goes through a single backward pass, so the scoring head
//! only sees the detection loss, the relation head only the relation loss,
//! and the encoder both.

mod checkpoint;

use std::sync::Arc;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use crate::detectors::{Detector, DeviationPrior, HeadKind, HeadLoss, ScoringHead};
use crate::encoder::{AggregatorCombine, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{NodeScorer, OpenSetSplit, SplitConfig};
use crate::graph::{AttributedGraph, NeighbourSample};
use crate::numeric::{adam_step, AdamConfig, Gradients, Parameterized, Tape, Var};
use crate::nsr::{sample_relations, LabelledSets, NsrConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cap on labelled normals per detection batch.
    pub batch_normals: usize,
    pub batch_relations: usize,
    pub n_labelled_anomalies: usize,
    pub labelled_normal_fraction: f64,
    pub alpha: f64,
    pub seed: u64,
    pub head: HeadKind,
    pub nsr_enabled: bool,
    pub use_unconnected_normal: bool,
    pub relation_mix: [f64; 3],
    /// Multiplier on the relation loss in the objective.
    pub nsr_weight: f64,
    pub hidden: usize,
    pub fanouts: Vec<usize>,
    pub aggregator_combine: AggregatorCombine,
    pub deviation_prior_draws: usize,
    pub deviation_margin: f64,
    /// Weight of the labelled-anomaly term of the hypersphere loss.
    pub eta_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            batch_normals: 512,
            batch_relations: 512,
            n_labelled_anomalies: 50,
            labelled_normal_fraction: 0.05,
            alpha: 0.8,
            seed: 0,
            head: HeadKind::Bce,
            nsr_enabled: true,
            use_unconnected_normal: true,
            relation_mix: [1.0, 1.0, 1.0],
            nsr_weight: 1.0,
            hidden: 64,
            fanouts: vec![10, 10],
            aggregator_combine: AggregatorCombine::Sum,
            deviation_prior_draws: 5000,
            deviation_margin: 5.0,
            eta_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn nsr_config(&self) -> NsrConfig {
        NsrConfig {
            alpha: self.alpha,
            batch_relations: self.batch_relations,
            use_unconnected_normal: self.use_unconnected_normal,
            relation_mix: self.relation_mix,
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            n_labelled_anomalies: self.n_labelled_anomalies,
            labelled_normal_fraction: self.labelled_normal_fraction,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden: self.hidden,
            combine: self.aggregator_combine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.nsr_config().validate()?;
        if self.batch_normals == 0 {
            return Err(Error::Config("batch_normals must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.fanouts.len() != crate::encoder::SAGE_DEPTH || self.fanouts.contains(&0) {
            return Err(Error::Config(format!(
                "fanouts must list {} positive values, got {:?}",
                crate::encoder::SAGE_DEPTH,
                self.fanouts
            )));
        }
        if !(self.nsr_weight >= 0.0 && self.nsr_weight.is_finite()) {
            return Err(Error::Config(format!("nsr_weight {} must be finite and >= 0", self.nsr_weight)));
        }
        if !(0.0..=1.0).contains(&self.labelled_normal_fraction) {
            return Err(Error::Config(format!(
                "labelled_normal_fraction {} outside [0, 1]",
                self.labelled_normal_fraction
            )));
        }
        if !(self.eta_weight >= 0.0 && self.eta_weight.is_finite()) {
            return Err(Error::Config(format!("eta_weight {} must be finite and >= 0", self.eta_weight)));
        }
        if !self.deviation_margin.is_finite() {
            return Err(Error::Config("deviation_margin must be finite".into()));
        }
        if self.head == HeadKind::Deviation && self.deviation_prior_draws < crate::detectors::MIN_PRIOR_DRAWS {
            return Err(Error::Config(format!(
                "deviation_prior_draws must be at least {}",
                crate::detectors::MIN_PRIOR_DRAWS
            )));
        }
        Ok(())
    }
}

/// The graph and labelled nodes a model is trained on.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub graph: &'a AttributedGraph,
    pub labelled_normals: Vec<usize>,
    pub labelled_anomalies: Vec<usize>,
    sets: LabelledSets,
}

impl<'a> TrainingData<'a> {
    pub fn new(graph: &'a AttributedGraph, labelled_normals: &[usize], labelled_anomalies: &[usize]) -> Result<Self> {
        let sets = LabelledSets::new(graph, labelled_normals, labelled_anomalies)?;
        let mut anomalies = labelled_anomalies.to_vec();
        anomalies.sort_unstable();
        anomalies.dedup();
        Ok(Self {
            graph,
            labelled_normals: sets.normals().to_vec(),
            labelled_anomalies: anomalies,
            sets,
        })
    }

    pub fn from_split(graph: &'a AttributedGraph, split: &OpenSetSplit) -> Result<Self> {
        Self::new(graph, &split.labelled_normals, &split.labelled_anomalies)
    }

    pub fn labelled_sets(&self) -> &LabelledSets {
        &self.sets
    }

    /// Labelled normals per detection batch.
    pub fn batch_normals(&self, cfg: &TrainConfig) -> usize {
        cfg.batch_normals.min(self.labelled_normals.len())
    }

    /// One epoch is one pass over the labelled normals.
    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        let b = self.batch_normals(cfg);
        if b == 0 {
            1
        } else {
            self.labelled_normals.len().div_ceil(b).max(1)
        }
    }

    pub fn total_iterations(&self, cfg: &TrainConfig) -> u64 {
        (cfg.epochs * self.steps_per_epoch(cfg)) as u64
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub detector: Detector,
    pub rng: ChaCha8Rng,
    /// Completed training steps.
    pub iteration: u64,
}

fn build_detector(cfg: &TrainConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Detector> {
    let encoder = Encoder::new(cfg.encoder_config(input_dim), rng);
    let head = ScoringHead::new(cfg.head, cfg.hidden, rng);
    Detector::compose(encoder, head, cfg.nsr_enabled, rng)
}

impl ModelState {
    /// Freshly initialised parameters drawn from the configured seed.
    pub fn new(data: &TrainingData, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.labelled_normals.is_empty() {
            return Err(Error::Config("training needs at least one labelled normal".into()));
        }
        if data.labelled_anomalies.is_empty() && cfg.head != HeadKind::Hypersphere {
            return Err(Error::Config(format!("the {} head needs labelled anomalies", cfg.head)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut detector = build_detector(cfg, data.graph.feature_dim(), &mut rng)?;
        detector.fit_centre(data.graph, &data.labelled_normals)?;
        Ok(Self {
            config: cfg.clone(),
            detector,
            rng,
            iteration: 0,
        })
    }

    /// Parameter layout for `cfg` with placeholder values, to be overwritten
    /// from a checkpoint.
    pub(crate) fn skeleton(cfg: &TrainConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let detector = build_detector(cfg, input_dim, &mut rng)?;
        Ok(Self {
            config: cfg.clone(),
            detector,
            rng,
            iteration: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.detector.encoder.config().input_dim
    }
}

impl NodeScorer for ModelState {
    fn score_nodes(&self, g: &AttributedGraph, nodes: &[usize]) -> Result<Vec<f64>> {
        if g.feature_dim() != self.input_dim() {
            return Err(Error::Shape {
                op: "score",
                left: format!("graph feature dim {}", g.feature_dim()),
                right: format!("model input dim {}", self.input_dim()),
            });
        }
        self.detector.score(g, nodes)
    }
}

/// Losses reported for one step. `total = ad_loss + nsr_weight * nsr_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub iteration: u64,
    pub ad_loss: f64,
    pub nsr_loss: f64,
    pub total: f64,
}

/// The random draws of one step, fixed so the objective can be re-evaluated.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub sample: NeighbourSample,
    /// Rows of the sample's roots forming the detection batch.
    pub ad_rows: Arc<Vec<usize>>,
    /// `true` = labelled anomaly.
    pub ad_labels: Vec<bool>,
    pub rel_v_rows: Arc<Vec<usize>>,
    pub rel_u_rows: Arc<Vec<usize>>,
    pub rel_labels: Arc<Vec<f64>>,
    pub prior: Option<DeviationPrior>,
}

/// Draws a detection batch, a relation batch, the deviation prior and the
/// neighbourhood sample, in that order, from the state's generator.
pub fn prepare_batch(state: &mut ModelState, data: &TrainingData) -> Result<TrainBatch> {
    let cfg = &state.config;
    let rng = &mut state.rng;
    let g = data.graph;
    let take = data.batch_normals(cfg);
    let mut ad_nodes: Vec<usize> = index::sample(rng, data.labelled_normals.len(), take)
        .into_iter()
        .map(|i| data.labelled_normals[i])
        .collect();
    let mut ad_labels = vec![false; ad_nodes.len()];
    ad_nodes.extend(&data.labelled_anomalies);
    ad_labels.resize(ad_nodes.len(), true);

    let relations = if state.detector.nsr_enabled {
        sample_relations(g, &data.sets, &cfg.nsr_config(), rng)?
    } else {
        Vec::new()
    };
    let prior = match cfg.head {
        HeadKind::Deviation => Some(DeviationPrior::draw(rng, cfg.deviation_prior_draws)?),
        _ => None,
    };

    // Unique roots in first-seen order.
    let mut row_of = std::collections::HashMap::new();
    let mut roots = Vec::new();
    let mut row = |v: usize| {
        *row_of.entry(v).or_insert_with(|| {
            roots.push(v);
            roots.len() - 1
        })
    };
    let ad_rows: Vec<usize> = ad_nodes.iter().map(|&v| row(v)).collect();
    let rel_v_rows: Vec<usize> = relations.iter().map(|r| row(r.v)).collect();
    let rel_u_rows: Vec<usize> = relations.iter().map(|r| row(r.u)).collect();
    let rel_labels: Vec<f64> = relations.iter().map(|r| r.label).collect();
    let sample = NeighbourSample::sample(g, &roots, &cfg.fanouts, rng);
    Ok(TrainBatch {
        sample,
        ad_rows: Arc::new(ad_rows),
        ad_labels,
        rel_v_rows: Arc::new(rel_v_rows),
        rel_u_rows: Arc::new(rel_u_rows),
        rel_labels: Arc::new(rel_labels),
        prior,
    })
}

/// Handles to the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub ad: Var,
    /// Absent when the relation head is disabled.
    pub nsr: Option<Var>,
}

/// Records the joint objective of `batch` on `tape`.
pub fn objective<'a>(
    detector: &'a Detector,
    cfg: &TrainConfig,
    g: &AttributedGraph,
    batch: &TrainBatch,
    tape: &mut Tape<'a>,
) -> Result<Objective> {
    let z = detector.encoder.forward(tape, g, &batch.sample)?;
    let z_ad = tape.gather(z, batch.ad_rows.clone())?;
    let head_cfg = HeadLoss {
        prior: batch.prior.as_ref(),
        margin: cfg.deviation_margin,
        eta_weight: cfg.eta_weight,
    };
    let ad = detector.ad_loss(tape, z_ad, &batch.ad_labels, &head_cfg)?;
    if !detector.nsr_enabled {
        return Ok(Objective { total: ad, ad, nsr: None });
    }
    let nsr = detector.nsr.loss(
        tape,
        z,
        batch.rel_v_rows.clone(),
        batch.rel_u_rows.clone(),
        batch.rel_labels.clone(),
    )?;
    let weighted = tape.scale(nsr, cfg.nsr_weight);
    let total = tape.add(ad, weighted)?;
    Ok(Objective { total, ad, nsr: Some(nsr) })
}

/// Updates every parameter group that received a gradient.
fn apply_update(detector: &mut Detector, grads: &Gradients, adam: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for group in detector.params_mut() {
        if let Some(g) = grads.get(&group.name) {
            group.grad.add_assign(g)?;
            adam_step(group, adam)?;
        }
    }
    Ok(())
}

/// One optimisation step.
pub fn train_step(state: &mut ModelState, data: &TrainingData) -> Result<StepLosses> {
    let batch = prepare_batch(state, data)?;
    let mut tape = Tape::new();
    let obj = objective(&state.detector, &state.config, data.graph, &batch, &mut tape)?;
    let losses = StepLosses {
        iteration: state.iteration,
        ad_loss: tape.scalar(obj.ad),
        nsr_loss: obj.nsr.map_or(0.0, |v| tape.scalar(v)),
        total: tape.scalar(obj.total),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("objective at iteration {}", state.iteration)));
    }
    let grads = tape.backward(obj.total, 1.0)?;
    apply_update(&mut state.detector, &grads, &state.config.adam())?;
    state.iteration += 1;
    Ok(losses)
}

/// Continues training until `state.iteration == stop_at`.
pub fn train_until(state: &mut ModelState, data: &TrainingData, stop_at: u64) -> Result<Vec<StepLosses>> {
    let mut history = Vec::with_capacity(stop_at.saturating_sub(state.iteration) as usize);
    while state.iteration < stop_at {
        let losses = train_step(state, data)?;
        if losses.iteration % 50 == 0 {
            debug!(
                "iteration {}: ad {:.5} nsr {:.5}",
                losses.iteration, losses.ad_loss, losses.nsr_loss
            );
        }
        history.push(losses);
    }
    Ok(history)
}

/// Continues a (possibly restored) run to the end of its configured epochs.
pub fn resume(state: &mut ModelState, data: &TrainingData) -> Result<Vec<StepLosses>> {
    let stop = data.total_iterations(&state.config);
    let history = train_until(state, data, stop)?;
    if state.config.head == HeadKind::Hypersphere {
        log_embedding_spread(state, data)?;
    }
    Ok(history)
}

/// Initialises and trains a model for `epochs * steps_per_epoch` steps.
pub fn train(data: &TrainingData, cfg: &TrainConfig) -> Result<(ModelState, Vec<StepLosses>)> {
    let mut state = ModelState::new(data, cfg)?;
    let history = resume(&mut state, data)?;
    Ok((state, history))
}

/// Logs the mean per-dimension variance of labelled-normal embeddings; a
/// value near zero indicates a collapsed hypersphere solution.
fn log_embedding_spread(state: &ModelState, data: &TrainingData) -> Result<()> {
    let z = state.detector.encoder.embed_full(data.graph, &data.labelled_normals)?;
    let mean = z.column_mean();
    let n = z.rows() as f64;
    let var: f64 = (0..z.rows())
        .flat_map(|i| z.row(i).iter().zip(mean.data()).map(|(a, m)| (a - m).powi(2)))
        .sum::<f64>()
        / (n * z.cols() as f64);
    info!("labelled-normal embedding variance {var:.3e}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::make_rotations;
    use crate::graph::SynthConfig;

    fn small_setup(n: usize, seed: u64) -> (AttributedGraph, OpenSetSplit) {
        let g = SynthConfig::small(n).generate(seed).unwrap();
        let split_cfg = SplitConfig {
            n_labelled_anomalies: 3,
            labelled_normal_fraction: 0.3,
        };
        let split = make_rotations(&g, &split_cfg, seed).unwrap().remove(0);
        (g, split)
    }

    fn quick(head: HeadKind, nsr: bool) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            head,
            nsr_enabled: nsr,
            hidden: 16,
            fanouts: vec![4, 4],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.learning_rate, 1e-3);
        assert!(TrainConfig { alpha: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { fanouts: vec![10], ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn missing_anomalies_is_a_config_error() {
        let (g, split) = small_setup(60, 0);
        let data = TrainingData::new(&g, &split.labelled_normals, &[]).unwrap();
        assert!(matches!(ModelState::new(&data, &quick(HeadKind::Bce, true)), Err(Error::Config(_))));
        assert!(matches!(ModelState::new(&data, &quick(HeadKind::Deviation, true)), Err(Error::Config(_))));
        assert!(ModelState::new(&data, &quick(HeadKind::Hypersphere, false)).is_ok());
    }

    #[test]
    fn disabled_nsr_leaves_relation_head_untouched() {
        let (g, split) = small_setup(60, 1);
        let data = TrainingData::from_split(&g, &split).unwrap();
        let mut state = ModelState::new(&data, &quick(HeadKind::Bce, false)).unwrap();
        let before = state.detector.nsr.clone();
        let head_before = state.detector.head.clone();
        let losses = train_step(&mut state, &data).unwrap();
        assert_eq!(losses.nsr_loss, 0.0);
        assert_eq!(state.detector.nsr, before);
        assert_ne!(state.detector.head, head_before);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (g, split) = small_setup(60, 2);
        let data = TrainingData::from_split(&g, &split).unwrap();
        for head in [HeadKind::Bce, HeadKind::Deviation, HeadKind::Hypersphere] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                ..quick(head, true)
            };
            let mut state = ModelState::new(&data, &cfg).unwrap();
            let before: Vec<_> = state.detector.params().iter().map(|p| p.value.clone()).collect();
            train_step(&mut state, &data).unwrap();
            let after: Vec<_> = state.detector.params().iter().map(|p| p.value.clone()).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn steps_are_bit_reproducible() {
        let (g, split) = small_setup(30, 3);
        let data = TrainingData::from_split(&g, &split).unwrap();
        let run = || {
            let mut s = ModelState::new(&data, &quick(HeadKind::Bce, true)).unwrap();
            let l = train_step(&mut s, &data).unwrap();
            (l, s)
        };
        let (la, sa) = run();
        let (lb, sb) = run();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        assert_eq!(la.nsr_loss.to_bits(), lb.nsr_loss.to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn objective_is_sum_of_reported_losses() {
        let (g, split) = small_setup(60, 4);
        let data = TrainingData::from_split(&g, &split).unwrap();
        let (_, history) = train(&data, &quick(HeadKind::Bce, true)).unwrap();
        for l in &history {
            assert!((l.total - (l.ad_loss + l.nsr_loss)).abs() <= 1e-12 * l.total.abs().max(1.0));
            assert!(l.nsr_loss > 0.0);
        }
    }

    #[test]
    fn history_length_and_zero_epochs() {
        let (g, split) = small_setup(80, 5);
        let data = TrainingData::from_split(&g, &split).unwrap();
        let cfg = TrainConfig {
            batch_normals: 5,
            ..quick(HeadKind::Bce, true)
        };
        let steps = data.steps_per_epoch(&cfg);
        assert_eq!(steps, data.labelled_normals.len().div_ceil(5));
        let (_, history) = train(&data, &cfg).unwrap();
        assert_eq!(history.len(), cfg.epochs * steps);

        let zero = TrainConfig { epochs: 0, ..cfg.clone() };
        let (state, history) = train(&data, &zero).unwrap();
        assert!(history.is_empty());
        assert_eq!(state, ModelState::new(&data, &zero).unwrap());
    }

    /// Gradients of each loss term alone.
    fn split_gradients(head: HeadKind, seed: u64) -> (Gradients, Gradients, Vec<String>) {
        let (g, split) = small_setup(60, seed);
        let data = TrainingData::from_split(&g, &split).unwrap();
        let mut state = ModelState::new(&data, &quick(head, true)).unwrap();
        let batch = prepare_batch(&mut state, &data).unwrap();
        let mut tape = Tape::new();
        let obj = objective(&state.detector, &state.config, &g, &batch, &mut tape).unwrap();
        let ad = tape.backward(obj.ad, 1.0).unwrap();
        let nsr = tape.backward(obj.nsr.unwrap(), 1.0).unwrap();
        let names = state.detector.params().iter().map(|p| p.name.clone()).collect();
        (ad, nsr, names)
    }

    fn is_zero_or_absent(grads: &Gradients, name: &str) -> bool {
        grads.get(name).is_none_or(|g| g.data().iter().all(|&x| x == 0.0))
    }

    #[test]
    fn each_loss_reaches_only_its_groups() {
        for head in [HeadKind::Bce, HeadKind::Deviation] {
            let (ad, nsr, names) = split_gradients(head, 6);
            for name in &names {
                if name.starts_with("nsr.") {
                    assert!(is_zero_or_absent(&ad, name), "{name} got a detection gradient");
                    assert!(!is_zero_or_absent(&nsr, name), "{name} missing its relation gradient");
                } else if name.starts_with("head.") {
                    assert!(is_zero_or_absent(&nsr, name), "{name} got a relation gradient");
                    assert!(!is_zero_or_absent(&ad, name), "{name} missing its detection gradient");
                }
            }
            let encoder_touched = |g: &Gradients| names.iter().filter(|n| n.starts_with("encoder.")).any(|n| !is_zero_or_absent(g, n));
            assert!(encoder_touched(&ad) && encoder_touched(&nsr));
        }
    }
}
