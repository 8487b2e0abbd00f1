use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use nsreg::eval::{evaluate, make_rotations, EvalReport, SplitConfig};
use nsreg::graph::{save_graph, separability_auc, AttributedGraph, GraphFiles, SynthConfig};
use nsreg::numeric::{grad_check, numeric_gradient, GroupCheck, Parameterized, Tape};
use nsreg::trainer::{
    objective, prepare_batch, save_checkpoint, load_checkpoint, train, ModelState, StepLosses, TrainConfig, TrainingData,
};
use serde::Serialize;
use serde_json::json;

use crate::protocol::{run_protocol, thread_pool};
use crate::{CliError, CliResult, RunConfig};

/// Largest graph the gradient check accepts.
pub const GRADCHECK_MAX_NODES: usize = 50;

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    write_text(dir, name, &(nsreg::canonical_json(value)? + "\n"))
}

impl RunConfig {
    /// The graph from `data_dir`, or a synthetic graph from `synth` when no
    /// directory is given.
    pub fn graph(&self) -> CliResult<AttributedGraph> {
        if self.data_dir.is_some() {
            self.load_data()
        } else {
            Ok(self.synth.generate(self.synth_seed)?)
        }
    }
}

/// Generates a synthetic graph and writes it, with a manifest, to `out_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    cfg.synth.validate()?;
    let g = cfg.synth.generate(cfg.synth_seed)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    save_graph(&g, &GraphFiles::in_dir(dir, cfg.feature_format), cfg.feature_format)?;
    let separability = separability_auc(&g, cfg.synth_seed)?;
    if separability < 0.95 {
        warn!("raw-feature separability AUC {separability:.4} is below 0.95");
    }
    let class_sizes: Vec<usize> = std::iter::once(0)
        .chain(g.anomaly_classes())
        .map(|c| g.nodes_of_class(c).len())
        .collect();
    let manifest = json!({
        "generator_seed": cfg.synth_seed,
        "synth": cfg.synth,
        "num_nodes": g.num_nodes(),
        "num_edges": g.num_edges(),
        "feature_dim": g.feature_dim(),
        "class_sizes": class_sizes,
        "separability_auc": separability,
    });
    write_json(dir, "manifest.json", &manifest)?;
    cfg.write_resolved(dir)?;
    info!("wrote {} nodes and {} edges to {}", g.num_nodes(), g.num_edges(), dir.display());
    Ok(manifest)
}

fn losses_csv(history: &[StepLosses]) -> String {
    let mut out = String::from("iteration,ad_loss,nsr_loss,total\n");
    for l in history {
        let _ = writeln!(out, "{},{},{},{}", l.iteration, l.ad_loss, l.nsr_loss, l.total);
    }
    out
}

/// Trains one model on rotation `cfg.rotation` and writes `checkpoint.nsrc`,
/// `losses.csv`, `split.json` and `config.json`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<(ModelState, Vec<StepLosses>)> {
    cfg.validate()?;
    let g = cfg.graph()?;
    let split = rotation_split(&g, &cfg.train.split_config(), cfg.train.seed, cfg.rotation)?;
    let data = TrainingData::from_split(&g, &split)?;
    let (state, history) = train(&data, &cfg.train)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    save_checkpoint(&state, &dir.join("checkpoint.nsrc"))?;
    write_text(dir, "losses.csv", &losses_csv(&history))?;
    write_json(dir, "split.json", &split)?;
    cfg.write_resolved(dir)?;
    Ok((state, history))
}

fn rotation_split(
    g: &AttributedGraph,
    split_cfg: &SplitConfig,
    seed: u64,
    rotation: usize,
) -> CliResult<nsreg::eval::OpenSetSplit> {
    let mut splits = make_rotations(g, split_cfg, seed)?;
    if rotation >= splits.len() {
        return Err(CliError::Config(format!(
            "rotation {rotation} requested but the graph has {} anomaly classes",
            splits.len()
        )));
    }
    Ok(splits.swap_remove(rotation))
}

/// Evaluates `cfg.checkpoint` on rotation `cfg.rotation`, re-drawing the
/// split the checkpoint was trained with. Writes `report.json` and `report.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint".into()))?;
    let state = load_checkpoint(path)?;
    let g = cfg.graph()?;
    if g.feature_dim() != state.input_dim() {
        return Err(CliError::Data(nsreg::Error::Shape {
            op: "eval",
            left: format!("checkpoint input dim {}", state.input_dim()),
            right: format!("data feature dim {}", g.feature_dim()),
        }));
    }
    let split = rotation_split(&g, &state.config.split_config(), state.config.seed, cfg.rotation)?;
    let row = evaluate(&state, &g, &split, cfg.rotation, state.config.seed)?;
    let report = EvalReport::from_rows(vec![row]);
    let dir = &cfg.out_dir;
    write_text(dir, "report.json", &(report.to_canonical_json()? + "\n"))?;
    write_text(dir, "report.csv", &report.to_csv())?;
    cfg.write_resolved(dir)?;
    Ok(report)
}

/// One (alpha, rotation, seed) result of an alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub rotation: usize,
    pub seen_class: u32,
    pub seed: u64,
    pub auc_roc_all: f64,
    pub auc_pr_all: f64,
    pub auc_roc_unseen: f64,
    pub auc_pr_unseen: f64,
}

/// Runs the full protocol for every alpha in `cfg.alphas` and writes
/// `sweep.csv` (one row per alpha, rotation and seed) and `sweep_summary.csv`.
pub fn cmd_sweep_alpha(cfg: &RunConfig) -> CliResult<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.alphas.is_empty() {
        return Err(CliError::Config("no alphas to sweep".into()));
    }
    let g = cfg.graph()?;
    let pool = thread_pool()?;
    let mut rows = Vec::new();
    let mut summary = String::from("alpha,auc_roc_all,auc_pr_all,auc_roc_unseen,auc_pr_unseen\n");
    for &alpha in &cfg.alphas {
        let train_cfg = TrainConfig { alpha, ..cfg.train.clone() };
        let report = run_protocol(&g, &train_cfg, cfg.seeds, &pool)?;
        let o = &report.overall;
        let _ = writeln!(
            summary,
            "{alpha},{},{},{},{}",
            o.auc_roc_all.mean, o.auc_pr_all.mean, o.auc_roc_unseen.mean, o.auc_pr_unseen.mean
        );
        rows.extend(report.rows.iter().map(|r| SweepRow {
            alpha,
            rotation: r.rotation,
            seen_class: r.seen_class,
            seed: r.seed,
            auc_roc_all: r.auc_roc_all,
            auc_pr_all: r.auc_pr_all,
            auc_roc_unseen: r.auc_roc_unseen,
            auc_pr_unseen: r.auc_pr_unseen,
        }));
    }
    let mut csv = String::from("alpha,rotation,seen_class,seed,auc_roc_all,auc_pr_all,auc_roc_unseen,auc_pr_unseen\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.alpha, r.rotation, r.seen_class, r.seed, r.auc_roc_all, r.auc_pr_all, r.auc_roc_unseen, r.auc_pr_unseen
        );
    }
    let dir = &cfg.out_dir;
    write_text(dir, "sweep.csv", &csv)?;
    write_text(dir, "sweep_summary.csv", &summary)?;
    cfg.write_resolved(dir)?;
    Ok(rows)
}

/// Outcome of [`cmd_gradcheck`].
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub nodes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Groups without an analytic gradient whose numeric gradient is non-zero.
    pub missing_paths: Vec<String>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let status = match g.max_rel_error {
                None => "no gradient path".to_string(),
                Some(e) if e < self.tolerance => format!("ok    {e:.3e}"),
                Some(e) => format!("FAIL  {e:.3e}"),
            };
            let _ = writeln!(out, "{:<24} {:>6}  {status}", g.name, g.entries);
        }
        for name in &self.missing_paths {
            let _ = writeln!(out, "{name:<24} FAIL  loss depends on it but no gradient was produced");
        }
        let _ = writeln!(out, "{}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

/// Finite-difference check of the full training objective on a small
/// synthetic graph. `corrupt` perturbs one analytic gradient entry, as a
/// negative control.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> CliResult<GradcheckReport> {
    cfg.validate()?;
    let n = cfg.gradcheck_nodes;
    if n > GRADCHECK_MAX_NODES {
        return Err(CliError::Config(format!(
            "gradcheck runs on at most {GRADCHECK_MAX_NODES} nodes, got {n}"
        )));
    }
    let synth = SynthConfig {
        feature_dim: cfg.synth.feature_dim,
        ..SynthConfig::small(n)
    };
    let g = synth.generate(cfg.synth_seed)?;
    let split_cfg = SplitConfig {
        n_labelled_anomalies: 2,
        labelled_normal_fraction: 0.3,
    };
    let split = rotation_split(&g, &split_cfg, cfg.train.seed, 0)?;
    let data = TrainingData::from_split(&g, &split)?;
    let mut state = ModelState::new(&data, &cfg.train)?;
    let batch = prepare_batch(&mut state, &data)?;
    let train_cfg = state.config.clone();

    let mut tape = Tape::new();
    let obj = objective(&state.detector, &train_cfg, &g, &batch, &mut tape)?;
    let mut grads = tape.backward(obj.total, 1.0)?;
    if corrupt {
        let (name, grad) = grads
            .iter()
            .find(|(_, m)| m.max_abs() > 0.0)
            .map(|(n, m)| (n.clone(), m.clone()))
            .ok_or_else(|| CliError::Verification("objective has no gradient".into()))?;
        let mut bad = grad;
        let i = (0..bad.data().len())
            .max_by(|&a, &b| bad.data()[a].abs().total_cmp(&bad.data()[b].abs()))
            .expect("non-empty gradient");
        bad.data_mut()[i] *= 1.01;
        grads.insert(name, bad);
    }
    let loss = |d: &nsreg::detectors::Detector| -> nsreg::Result<f64> {
        let mut t = Tape::new();
        let o = objective(d, &train_cfg, &g, &batch, &mut t)?;
        Ok(t.scalar(o.total))
    };
    let step = cfg.gradcheck_step;
    let groups = grad_check(&mut state.detector, &grads, step, cfg.gradcheck_tolerance, loss)?;
    let mut missing_paths = Vec::new();
    for group in groups.iter().filter(|g| !g.has_gradient_path()) {
        let numeric = numeric_gradient(&mut state.detector, &group.name, step, loss)?.unwrap_or_default();
        if numeric.iter().any(|&x| x != 0.0) {
            missing_paths.push(group.name.clone());
        }
    }
    let passed = missing_paths.is_empty() && groups.iter().all(|g| g.passes(cfg.gradcheck_tolerance));
    debug_assert_eq!(groups.len(), state.detector.params().len());
    let report = GradcheckReport {
        nodes: g.num_nodes(),
        step,
        tolerance: cfg.gradcheck_tolerance,
        groups,
        missing_paths,
        passed,
    };
    write_json(&cfg.out_dir, "gradcheck.json", &report)?;
    Ok(report)
}
