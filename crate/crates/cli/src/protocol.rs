use log::info;
use nsreg::eval::{evaluate, make_rotations, EvalReport, EvalRow};
use nsreg::graph::AttributedGraph;
use nsreg::trainer::{train, ModelState, StepLosses, TrainConfig, TrainingData};
use nsreg::Result;
use rayon::prelude::*;

use crate::{CliError, CliResult};

/// One trained and evaluated model.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub state: ModelState,
    pub history: Vec<StepLosses>,
    pub row: EvalRow,
}

/// Trains on rotation `rotation` of the splits drawn with `seed` and
/// evaluates on that rotation's test sets. `cfg.seed` is replaced by `seed`.
pub fn train_and_evaluate(g: &AttributedGraph, cfg: &TrainConfig, rotation: usize, seed: u64) -> Result<RunRecord> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut splits = make_rotations(g, &cfg.split_config(), seed)?;
    if rotation >= splits.len() {
        return Err(nsreg::Error::Config(format!(
            "rotation {rotation} requested but the graph has {} anomaly classes",
            splits.len()
        )));
    }
    let split = splits.swap_remove(rotation);
    let data = TrainingData::from_split(g, &split)?;
    let (state, history) = train(&data, &cfg)?;
    let row = evaluate(&state, g, &split, rotation, seed)?;
    info!(
        "rotation {rotation} seed {seed}: unseen AUC-ROC {:.4}, all AUC-ROC {:.4}",
        row.auc_roc_unseen, row.auc_roc_all
    );
    Ok(RunRecord { state, history, row })
}

/// A worker pool capped by the `NSREG_THREADS` environment variable.
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("NSREG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("NSREG_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Config("NSREG_THREADS must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

/// Every rotation crossed with seeds `cfg.seed .. cfg.seed + seeds`, run in
/// parallel on `pool`. Rows come back sorted by (rotation, seed).
pub fn run_protocol(g: &AttributedGraph, cfg: &TrainConfig, seeds: usize, pool: &rayon::ThreadPool) -> Result<EvalReport> {
    let rotations = g.anomaly_classes().len();
    let jobs: Vec<(usize, u64)> = (0..rotations)
        .flat_map(|r| (0..seeds as u64).map(move |i| (r, cfg.seed + i)))
        .collect();
    let rows: Result<Vec<EvalRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, seed)| train_and_evaluate(g, cfg, r, seed).map(|rec| rec.row))
            .collect()
    });
    Ok(EvalReport::from_rows(rows?))
}
