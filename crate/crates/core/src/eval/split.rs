use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NORMAL_CLASS};

/// How many nodes each rotation labels for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_labelled_anomalies: usize,
    pub labelled_normal_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_labelled_anomalies: 50,
            labelled_normal_fraction: 0.05,
        }
    }
}

/// One seen/unseen rotation: a single anomaly class provides the labelled
/// anomalies, every other anomaly class is unseen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub seen_class: u32,
    pub labelled_anomalies: Vec<usize>,
    pub labelled_normals: Vec<usize>,
    /// Every unlabelled node.
    pub test_all: Vec<usize>,
    /// Unlabelled normals plus unseen-class anomalies.
    pub test_unseen: Vec<usize>,
}

impl OpenSetSplit {
    /// Checks the split's invariants against `g`.
    pub fn validate(&self, g: &AttributedGraph) -> Result<()> {
        let n = g.num_nodes();
        let mut labelled = vec![false; n];
        for &v in &self.labelled_normals {
            if g.class_of(v) != NORMAL_CLASS {
                return Err(Error::State(format!("labelled normal {v} is an anomaly")));
            }
            labelled[v] = true;
        }
        for &v in &self.labelled_anomalies {
            if g.class_of(v) != self.seen_class {
                return Err(Error::State(format!("labelled anomaly {v} is not in the seen class")));
            }
            if std::mem::replace(&mut labelled[v], true) {
                return Err(Error::State(format!("node {v} labelled twice")));
            }
        }
        let expected_all: Vec<usize> = (0..n).filter(|&v| !labelled[v]).collect();
        if self.test_all != expected_all {
            return Err(Error::State("test_all is not the unlabelled node set".into()));
        }
        let expected_unseen: Vec<usize> = expected_all
            .iter()
            .copied()
            .filter(|&v| g.class_of(v) != self.seen_class)
            .collect();
        if self.test_unseen != expected_unseen {
            return Err(Error::State("test_unseen must drop exactly the seen-class anomalies".into()));
        }
        Ok(())
    }
}

/// Generator for rotation `rotation` under base seed `seed`.
fn rotation_rng(seed: u64, rotation: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rotation as u64 + 1);
    rng
}

/// One split per anomaly class, in ascending class order. Labelled nodes
/// are drawn uniformly and independently for each rotation.
pub fn make_rotations(g: &AttributedGraph, cfg: &SplitConfig, seed: u64) -> Result<Vec<OpenSetSplit>> {
    let classes = g.anomaly_classes();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "open-set rotations need at least two anomaly classes, found {}",
            classes.len()
        )));
    }
    classes
        .iter()
        .enumerate()
        .map(|(r, &c)| make_split(g, c, cfg, &mut rotation_rng(seed, r)))
        .collect()
}

pub fn make_split(g: &AttributedGraph, seen_class: u32, cfg: &SplitConfig, rng: &mut ChaCha8Rng) -> Result<OpenSetSplit> {
    if !(0.0..=1.0).contains(&cfg.labelled_normal_fraction) {
        return Err(Error::Config(format!(
            "labelled_normal_fraction {} outside [0, 1]",
            cfg.labelled_normal_fraction
        )));
    }
    let members = g.nodes_of_class(seen_class);
    if members.is_empty() {
        return Err(Error::Config(format!("anomaly class {seen_class} has no nodes")));
    }
    let take = if members.len() < cfg.n_labelled_anomalies {
        warn!(
            "class {seen_class} has {} nodes, fewer than the {} requested labelled anomalies; using all",
            members.len(),
            cfg.n_labelled_anomalies
        );
        members.len()
    } else {
        cfg.n_labelled_anomalies
    };
    let mut labelled_anomalies: Vec<usize> = index::sample(rng, members.len(), take)
        .into_iter()
        .map(|i| members[i])
        .collect();
    labelled_anomalies.sort_unstable();

    let normals = g.nodes_of_class(NORMAL_CLASS);
    let n_normals = ((normals.len() as f64 * cfg.labelled_normal_fraction).round() as usize)
        .clamp(1.min(normals.len()), normals.len());
    let mut labelled_normals: Vec<usize> = index::sample(rng, normals.len(), n_normals)
        .into_iter()
        .map(|i| normals[i])
        .collect();
    labelled_normals.sort_unstable();

    let mut labelled = vec![false; g.num_nodes()];
    for &v in labelled_anomalies.iter().chain(&labelled_normals) {
        labelled[v] = true;
    }
    let test_all: Vec<usize> = (0..g.num_nodes()).filter(|&v| !labelled[v]).collect();
    let test_unseen = test_all
        .iter()
        .copied()
        .filter(|&v| g.class_of(v) != seen_class)
        .collect();
    Ok(OpenSetSplit {
        seen_class,
        labelled_anomalies,
        labelled_normals,
        test_all,
        test_unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthConfig;

    #[test]
    fn one_rotation_per_class() {
        let g = SynthConfig::small(200).generate(0).unwrap();
        let splits = make_rotations(&g, &SplitConfig::default(), 1).unwrap();
        assert_eq!(splits.len(), 2);
        let first = &splits[0];
        assert_eq!(first.seen_class, 1);
        assert!(first.labelled_anomalies.iter().all(|&v| g.class_of(v) == 1));
        assert!(first.labelled_normals.iter().all(|&v| g.class_of(v) == 0));
    }

    #[test]
    fn small_class_uses_everything() {
        let g = SynthConfig::small(100).generate(0).unwrap();
        let splits = make_rotations(&g, &SplitConfig::default(), 0).unwrap();
        assert_eq!(splits[0].labelled_anomalies.len(), g.nodes_of_class(1).len());
    }

    #[test]
    fn deterministic_per_seed() {
        let g = SynthConfig::small(150).generate(4).unwrap();
        let cfg = SplitConfig {
            n_labelled_anomalies: 3,
            ..SplitConfig::default()
        };
        let a = make_rotations(&g, &cfg, 7).unwrap();
        assert_eq!(a, make_rotations(&g, &cfg, 7).unwrap());
        assert_ne!(a, make_rotations(&g, &cfg, 8).unwrap());
    }

    #[test]
    fn needs_two_classes() {
        let cfg = SynthConfig {
            n_anomaly_per_class: 0,
            ..SynthConfig::small(50)
        };
        let g = cfg.generate(0).unwrap();
        assert!(make_rotations(&g, &SplitConfig::default(), 0).is_err());
    }

    #[test]
    fn invariants_hold_on_random_graphs() {
        for seed in 0..100u64 {
            let mut cfg = SynthConfig::small(40 + (seed as usize % 7) * 10);
            cfg.n_anomaly_classes = 2 + seed as usize % 3;
            let g = cfg.generate(seed).unwrap();
            let split_cfg = SplitConfig {
                n_labelled_anomalies: 1 + seed as usize % 4,
                labelled_normal_fraction: 0.05 + 0.01 * (seed % 10) as f64,
            };
            let splits = make_rotations(&g, &split_cfg, seed).unwrap();
            assert_eq!(splits.len(), cfg.n_anomaly_classes);
            for s in &splits {
                s.validate(&g).unwrap();
                assert!(s.test_unseen.iter().all(|v| s.test_all.contains(v)));
            }
        }
    }
}
