use std::path::{Path, PathBuf};

use nsreg::graph::{load_graph, AttributedGraph, FeatureFormat, GraphFiles, SynthConfig};
use nsreg::graph::read_features;
use nsreg::eval::split_anomaly_class;
use nsreg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Every setting a command reads. Written next to each command's outputs
/// as canonical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub synth_seed: u64,
    pub train: TrainConfig,
    /// Runs per rotation; run `i` uses seed `train.seed + i`.
    pub seeds: usize,
    /// Rotation (index of the seen anomaly class) for single-model commands.
    pub rotation: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub feature_format: FeatureFormat,
    pub alphas: Vec<f64>,
    /// Re-label a single anomaly class into this many k-means clusters.
    pub kmeans_classes: Option<usize>,
    /// Optional embedding matrix (feature-file format) for the clustering;
    /// raw features are used otherwise.
    pub kmeans_embeddings: Option<PathBuf>,
    pub gradcheck_nodes: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            synth_seed: 0,
            train: TrainConfig::default(),
            seeds: 5,
            rotation: 0,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            feature_format: FeatureFormat::Csv,
            alphas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            kmeans_classes: None,
            kmeans_embeddings: None,
            gradcheck_nodes: 30,
            gradcheck_step: 1e-5,
            gradcheck_tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_canonical_json(&self) -> CliResult<String> {
        Ok(nsreg::canonical_json(self)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be at least 1".into()));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::Config(format!("alphas {:?} must lie in [0, 1]", self.alphas)));
        }
        if !(self.gradcheck_step > 0.0 && self.gradcheck_tolerance > 0.0) {
            return Err(CliError::Config("gradcheck step and tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_canonical_json()? + "\n")?;
        Ok(())
    }

    /// The graph in `data_dir`, re-labelled by k-means when requested.
    pub fn load_data(&self) -> CliResult<AttributedGraph> {
        let dir = self
            .data_dir
            .as_ref()
            .ok_or_else(|| CliError::Config("no data directory given".into()))?;
        let files = GraphFiles::discover(dir);
        let g = load_graph(&files.edges, &files.features, &files.labels)?;
        self.maybe_split_classes(g)
    }

    fn maybe_split_classes(&self, g: AttributedGraph) -> CliResult<AttributedGraph> {
        let Some(k) = self.kmeans_classes else {
            return Ok(g);
        };
        let embeddings = match &self.kmeans_embeddings {
            Some(path) => read_features(path)?,
            None => g.features().clone(),
        };
        Ok(split_anomaly_class(&g, &embeddings, k, self.train.seed)?)
    }
}
