//! Attributed graphs in compressed adjacency form.

mod io;
mod sampling;
mod synth;

pub use io::{load_graph, read_features, save_graph, write_features, FeatureFormat, GraphFiles};
pub use sampling::{Block, NeighbourSample};
pub use synth::{separability_auc, SynthConfig};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Class id of normal nodes; anomaly classes are numbered from 1.
pub const NORMAL_CLASS: u32 = 0;

/// Undirected node-attributed graph. Immutable once built.
///
/// Neighbour lists are sorted, deduplicated and free of self-loops; every
/// edge is stored in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    features: Matrix,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    node_class: Vec<u32>,
}

impl AttributedGraph {
    /// Builds a graph from an arbitrary edge list. Edges are symmetrised,
    /// duplicates merged and self-loops dropped.
    pub fn from_edges(features: Matrix, edges: &[(usize, usize)], node_class: Vec<u32>) -> Result<Self> {
        let n = features.rows();
        if node_class.len() != n {
            return Err(Error::Config(format!(
                "{} class labels for {} nodes",
                node_class.len(),
                n
            )));
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Config(format!("edge ({u}, {v}) references a node >= {n}")));
            }
            if u == v {
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Ok(Self {
            features,
            offsets,
            targets,
            node_class,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_class.len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn node_class(&self) -> &[u32] {
        &self.node_class
    }

    pub fn class_of(&self, v: usize) -> u32 {
        self.node_class[v]
    }

    pub fn is_anomaly(&self, v: usize) -> bool {
        self.node_class[v] != NORMAL_CLASS
    }

    pub fn neighbours(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbours(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbours(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    /// Sorted distinct anomaly class ids present in the graph.
    pub fn anomaly_classes(&self) -> Vec<u32> {
        let mut classes: Vec<u32> = self
            .node_class
            .iter()
            .copied()
            .filter(|&c| c != NORMAL_CLASS)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    pub fn nodes_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.node_class[v] == class).collect()
    }

    /// Returns a copy with anomaly classes replaced: `assignment[i]` is the
    /// new class (1-based) of the `i`-th anomaly node in id order.
    pub fn with_anomaly_classes(&self, assignment: &[u32]) -> Result<Self> {
        let anomalies: Vec<usize> = (0..self.num_nodes()).filter(|&v| self.is_anomaly(v)).collect();
        if anomalies.len() != assignment.len() {
            return Err(Error::Config(format!(
                "{} class assignments for {} anomaly nodes",
                assignment.len(),
                anomalies.len()
            )));
        }
        if assignment.contains(&NORMAL_CLASS) {
            return Err(Error::Config("anomaly reassignment uses the normal class id".into()));
        }
        let mut g = self.clone();
        for (&v, &c) in anomalies.iter().zip(assignment) {
            g.node_class[v] = c;
        }
        Ok(g)
    }

    /// Checks the structural invariants. Used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.offsets.len() != n + 1 || self.features.rows() != n {
            return Err(Error::State("adjacency/feature sizes disagree with node count".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::State("adjacency offsets decrease".into()));
        }
        for u in 0..n {
            for &v in self.neighbours(u) {
                if v >= n {
                    return Err(Error::State(format!("neighbour {v} of {u} out of range")));
                }
                if v == u {
                    return Err(Error::State(format!("self-loop at {u}")));
                }
                if !self.has_edge(v, u) {
                    return Err(Error::State(format!("edge ({u}, {v}) is not symmetric")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> AttributedGraph {
        AttributedGraph::from_edges(Matrix::zeros(3, 2), &[(0, 1), (1, 2)], vec![0, 0, 1]).unwrap()
    }

    #[test]
    fn path_degrees() {
        let g = path3();
        assert_eq!((0..3).map(|v| g.degree(v)).collect::<Vec<_>>(), vec![1, 2, 1]);
        g.validate().unwrap();
    }

    #[test]
    fn reverse_duplicates_and_loops_removed() {
        let g = AttributedGraph::from_edges(Matrix::zeros(3, 1), &[(0, 1), (1, 0), (2, 2), (0, 1)], vec![0; 3])
            .unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(AttributedGraph::from_edges(Matrix::zeros(2, 1), &[(0, 5)], vec![0; 2]).is_err());
    }

    #[test]
    fn reassign_anomaly_classes() {
        let g = path3().with_anomaly_classes(&[2]).unwrap();
        assert_eq!(g.node_class(), &[0, 0, 2]);
        assert!(path3().with_anomaly_classes(&[0]).is_err());
    }
}
