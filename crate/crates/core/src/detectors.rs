//! Anomaly scoring heads and their composition with an encoder.
//!
//! A [`Detector`] always owns a relation head so that checkpoints have one
//! layout, but only touches it during training when `nsr_enabled` is set.
//! Scoring never reads the relation head.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::NodeScorer;
use crate::graph::AttributedGraph;
use crate::numeric::{Dense, Matrix, ParamGroup, Parameterized, Tape, Var};
use crate::nsr::NsrHead;

/// Guard added to squared distances before inversion.
pub const HYPERSPHERE_EPS: f64 = 1e-6;

/// Minimum number of prior draws for the deviation loss.
pub const MIN_PRIOR_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Bce,
    Deviation,
    Hypersphere,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Bce => "bce",
            HeadKind::Deviation => "deviation",
            HeadKind::Hypersphere => "hypersphere",
        })
    }
}

/// Two-layer scoring network, ReLU hidden layer, scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::new("head.h1", width, width, rng),
            output: Dense::new("head.out", width, 1, rng),
        }
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        let a = self.hidden.forward(tape, z)?;
        let a = tape.relu(a);
        self.output.forward(tape, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoringHead {
    /// Sigmoid probability of being anomalous.
    Bce(Mlp),
    /// Unbounded score compared against a standard-normal prior.
    Deviation(Mlp),
    /// Squared distance to a fixed centre.
    Hypersphere { centre: Matrix },
}

impl ScoringHead {
    pub fn new<R: Rng + ?Sized>(kind: HeadKind, width: usize, rng: &mut R) -> Self {
        match kind {
            HeadKind::Bce => ScoringHead::Bce(Mlp::new(width, rng)),
            HeadKind::Deviation => ScoringHead::Deviation(Mlp::new(width, rng)),
            HeadKind::Hypersphere => ScoringHead::Hypersphere {
                centre: Matrix::zeros(1, width),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            ScoringHead::Bce(_) => HeadKind::Bce,
            ScoringHead::Deviation(_) => HeadKind::Deviation,
            ScoringHead::Hypersphere { .. } => HeadKind::Hypersphere,
        }
    }

    /// Expected embedding width.
    pub fn input_dim(&self) -> usize {
        match self {
            ScoringHead::Bce(m) | ScoringHead::Deviation(m) => m.hidden.inputs(),
            ScoringHead::Hypersphere { centre } => centre.cols(),
        }
    }

    /// Scores of the rows of `z` as an `n x 1` column; higher is more anomalous.
    pub fn score<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        let width = tape.value(z).cols();
        if width != self.input_dim() {
            return Err(Error::shape("score", tape.value(z).shape(), (1, self.input_dim())));
        }
        match self {
            ScoringHead::Bce(m) => {
                let logit = m.forward(tape, z)?;
                Ok(tape.sigmoid(logit))
            }
            ScoringHead::Deviation(m) => m.forward(tape, z),
            ScoringHead::Hypersphere { centre } => {
                let neg = tape.constant(centre.scale(-1.0));
                let diff = tape.add_row(z, neg)?;
                Ok(tape.row_squared_norm(diff))
            }
        }
    }

    pub fn params(&self) -> Vec<&ParamGroup> {
        match self {
            ScoringHead::Bce(m) | ScoringHead::Deviation(m) => {
                let mut p: Vec<&ParamGroup> = m.hidden.params().into();
                p.extend(m.output.params());
                p
            }
            ScoringHead::Hypersphere { .. } => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
        match self {
            ScoringHead::Bce(m) | ScoringHead::Deviation(m) => {
                let mut p: Vec<&mut ParamGroup> = m.hidden.params_mut().into();
                p.extend(m.output.params_mut());
                p
            }
            ScoringHead::Hypersphere { .. } => Vec::new(),
        }
    }
}

/// Mean and population standard deviation of a standard-normal sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationPrior {
    pub mean: f64,
    pub std: f64,
}

impl DeviationPrior {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, draws: usize) -> Result<Self> {
        if draws < MIN_PRIOR_DRAWS {
            return Err(Error::Config(format!(
                "deviation prior needs at least {MIN_PRIOR_DRAWS} draws, got {draws}"
            )));
        }
        let sample: Vec<f64> = (0..draws).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_sample(&sample)
    }

    pub fn from_sample(sample: &[f64]) -> Result<Self> {
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let std = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::NonFinite(format!("deviation prior standard deviation {std}")));
        }
        Ok(Self { mean, std })
    }
}

fn label_column(labels: &[bool], positive: bool) -> Matrix {
    Matrix::column(&labels.iter().map(|&y| if y == positive { 1.0 } else { 0.0 }).collect::<Vec<_>>())
}

fn check_batch(op: &'static str, tape: &Tape, scores: Var, labels: &[bool]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::State(format!("{op}: empty anomaly-detection batch")));
    }
    let shape = tape.value(scores).shape();
    if shape != (labels.len(), 1) {
        return Err(Error::shape(op, shape, (labels.len(), 1)));
    }
    Ok(())
}

/// Mean cross-entropy of anomaly probabilities against hard labels.
pub fn ad_loss_bce(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    check_batch("ad_loss_bce", tape, probs, labels)?;
    let targets = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    tape.bce_mean(probs, Arc::new(targets))
}

/// `mean[(1 − y)·|dev| + y·max(0, margin − dev)]`, `dev = (s − μ) / σ`.
pub fn ad_loss_deviation(tape: &mut Tape, scores: Var, labels: &[bool], prior: &DeviationPrior, margin: f64) -> Result<Var> {
    check_batch("ad_loss_deviation", tape, scores, labels)?;
    let dev = tape.affine(scores, 1.0 / prior.std, -prior.mean / prior.std);
    let inlier = tape.abs(dev);
    let gap = tape.affine(dev, -1.0, margin);
    let outlier = tape.relu(gap);
    let normal_mask = tape.constant(label_column(labels, false));
    let anomaly_mask = tape.constant(label_column(labels, true));
    let a = tape.mul(inlier, normal_mask)?;
    let b = tape.mul(outlier, anomaly_mask)?;
    let per_node = tape.add(a, b)?;
    Ok(tape.mean(per_node))
}

/// Mean squared distance of normals to `centre` plus `eta_weight` times the
/// mean inverse squared distance of anomalies. Empty groups contribute zero.
pub fn ad_loss_hypersphere(
    tape: &mut Tape,
    z_normals: Var,
    z_anomalies: Var,
    centre: &Matrix,
    eta_weight: f64,
) -> Result<Var> {
    let neg = tape.constant(centre.scale(-1.0));
    let dn = tape.add_row(z_normals, neg)?;
    let dn = tape.row_squared_norm(dn);
    let normal_term = tape.mean(dn);
    if tape.value(z_anomalies).rows() == 0 {
        return Ok(normal_term);
    }
    let da = tape.add_row(z_anomalies, neg)?;
    let da = tape.row_squared_norm(da);
    let inv = tape.reciprocal(da, HYPERSPHERE_EPS);
    let anomaly_term = tape.mean(inv);
    let anomaly_term = tape.scale(anomaly_term, eta_weight);
    tape.add(normal_term, anomaly_term)
}

/// Loss settings that depend on the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss<'a> {
    pub prior: Option<&'a DeviationPrior>,
    pub margin: f64,
    pub eta_weight: f64,
}

/// An encoder, a scoring head and a relation head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub encoder: Encoder,
    pub head: ScoringHead,
    pub nsr: NsrHead,
    pub nsr_enabled: bool,
}

impl Detector {
    pub fn compose<R: Rng + ?Sized>(encoder: Encoder, head: ScoringHead, nsr_enabled: bool, rng: &mut R) -> Result<Self> {
        if encoder.output_dim() != head.input_dim() {
            return Err(Error::Shape {
                op: "compose",
                left: format!("encoder width {}", encoder.output_dim()),
                right: format!("head width {}", head.input_dim()),
            });
        }
        let nsr = NsrHead::new(encoder.output_dim(), rng);
        Ok(Self {
            encoder,
            head,
            nsr,
            nsr_enabled,
        })
    }

    /// Sets the hypersphere centre to the mean embedding of `normals`.
    /// No-op for the other heads.
    pub fn fit_centre(&mut self, g: &AttributedGraph, normals: &[usize]) -> Result<()> {
        if let ScoringHead::Hypersphere { centre } = &mut self.head {
            if normals.is_empty() {
                return Err(Error::Config("hypersphere centre needs labelled normals".into()));
            }
            *centre = self.encoder.embed_full(g, normals)?.column_mean();
        }
        Ok(())
    }

    /// Anomaly-detection loss for embedding rows `z` with labels `labels`
    /// (`true` = anomaly).
    pub fn ad_loss<'a>(&'a self, tape: &mut Tape<'a>, z: Var, labels: &[bool], cfg: &HeadLoss) -> Result<Var> {
        match &self.head {
            ScoringHead::Bce(_) => {
                let p = self.head.score(tape, z)?;
                ad_loss_bce(tape, p, labels)
            }
            ScoringHead::Deviation(_) => {
                let prior = cfg
                    .prior
                    .ok_or_else(|| Error::State("deviation loss needs a prior sample".into()))?;
                let s = self.head.score(tape, z)?;
                ad_loss_deviation(tape, s, labels, prior, cfg.margin)
            }
            ScoringHead::Hypersphere { centre } => {
                if labels.is_empty() {
                    return Err(Error::State("ad_loss_hypersphere: empty anomaly-detection batch".into()));
                }
                let rows = |want: bool| Arc::new((0..labels.len()).filter(|&i| labels[i] == want).collect::<Vec<_>>());
                let zn = tape.gather(z, rows(false))?;
                let za = tape.gather(z, rows(true))?;
                ad_loss_hypersphere(tape, zn, za, centre, cfg.eta_weight)
            }
        }
    }

    /// Scores from full-neighbourhood embeddings.
    pub fn score(&self, g: &AttributedGraph, nodes: &[usize]) -> Result<Vec<f64>> {
        let z = self.encoder.embed_full(g, nodes)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let s = self.head.score(&mut tape, zv)?;
        Ok(tape.value(s).data().to_vec())
    }
}

impl Parameterized for Detector {
    fn params(&self) -> Vec<&ParamGroup> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p.extend(self.nsr.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p.extend(self.nsr.params_mut());
        p
    }
}

impl NodeScorer for Detector {
    fn score_nodes(&self, g: &AttributedGraph, nodes: &[usize]) -> Result<Vec<f64>> {
        self.score(g, nodes)
    }
}
