//! Layer-wise uniform neighbour sampling for mini-batch GraphSAGE.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttributedGraph;

/// One aggregation step: computes representations for `nodes` from the
/// previous frontier.
///
/// All positions index into the previous frontier's node list.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Global ids of the nodes produced by this step.
    pub nodes: Vec<usize>,
    /// Position of each node itself in the previous frontier.
    pub self_pos: Arc<Vec<usize>>,
    /// Segment boundaries into `neighbour_pos` / `neighbour_ids`, length `nodes.len() + 1`.
    pub offsets: Arc<Vec<usize>>,
    pub neighbour_pos: Arc<Vec<usize>>,
    pub neighbour_ids: Vec<usize>,
    /// True where the node has no neighbours at all in the graph.
    pub isolated: Vec<bool>,
}

impl Block {
    pub fn sampled(&self, i: usize) -> &[usize] {
        &self.neighbour_ids[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Sampled computation graph for a set of root nodes.
///
/// `frontiers[0]` lists the nodes whose raw features are read;
/// `frontiers[depth]` lists the distinct roots. `blocks[l]` maps
/// `frontiers[l]` to `frontiers[l + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourSample {
    /// `fanouts[i]` caps the neighbours drawn at hop `i + 1` from the roots.
    pub fanouts: Vec<usize>,
    /// Roots in the order requested (duplicates allowed).
    pub roots: Vec<usize>,
    /// Position of each requested root in the top frontier.
    pub root_pos: Arc<Vec<usize>>,
    pub frontiers: Vec<Vec<usize>>,
    pub blocks: Vec<Block>,
}

/// Sentinel-filled node → position map reused across frontiers.
struct PositionMap {
    slots: Vec<usize>,
    nodes: Vec<usize>,
}

impl PositionMap {
    fn new(n: usize) -> Self {
        Self {
            slots: vec![usize::MAX; n],
            nodes: Vec::new(),
        }
    }

    fn insert(&mut self, v: usize) -> usize {
        if self.slots[v] == usize::MAX {
            self.slots[v] = self.nodes.len();
            self.nodes.push(v);
        }
        self.slots[v]
    }

    fn get(&self, v: usize) -> usize {
        self.slots[v]
    }

    fn clear(&mut self) {
        for &v in &self.nodes {
            self.slots[v] = usize::MAX;
        }
        self.nodes.clear();
    }
}

impl NeighbourSample {
    /// Samples up to `fanouts[i]` neighbours per node at hop `i + 1`,
    /// uniformly without replacement; nodes of lower degree keep all
    /// neighbours. `usize::MAX` means "all neighbours".
    pub fn sample<R: Rng + ?Sized>(g: &AttributedGraph, roots: &[usize], fanouts: &[usize], rng: &mut R) -> Self {
        let depth = fanouts.len();
        let mut map = PositionMap::new(g.num_nodes());
        let root_pos: Vec<usize> = roots.iter().map(|&v| map.insert(v)).collect();
        let mut frontiers = vec![map.nodes.clone()];
        let mut top_down: Vec<(Vec<usize>, Vec<usize>, Vec<bool>)> = Vec::with_capacity(depth);

        // Walk outward from the roots; fanouts[0] applies to the roots themselves.
        for &fanout in fanouts {
            let current = frontiers.last().unwrap().clone();
            let mut offsets = Vec::with_capacity(current.len() + 1);
            let mut ids = Vec::new();
            let mut isolated = Vec::with_capacity(current.len());
            offsets.push(0);
            for &v in &current {
                let neigh = g.neighbours(v);
                isolated.push(neigh.is_empty());
                if neigh.len() <= fanout {
                    ids.extend_from_slice(neigh);
                } else {
                    ids.extend(index::sample(rng, neigh.len(), fanout).into_iter().map(|i| neigh[i]));
                }
                offsets.push(ids.len());
            }
            map.clear();
            for &v in current.iter().chain(&ids) {
                map.insert(v);
            }
            frontiers.push(map.nodes.clone());
            top_down.push((offsets, ids, isolated));
        }
        map.clear();

        // frontiers is currently roots-first; flip so index 0 is the input layer.
        frontiers.reverse();
        let mut blocks = Vec::with_capacity(depth);
        for (l, (offsets, ids, isolated)) in top_down.into_iter().rev().enumerate() {
            for &v in &frontiers[l] {
                map.insert(v);
            }
            let nodes = frontiers[l + 1].clone();
            let self_pos = nodes.iter().map(|&v| map.get(v)).collect();
            let neighbour_pos = ids.iter().map(|&v| map.get(v)).collect();
            map.clear();
            blocks.push(Block {
                nodes,
                self_pos: Arc::new(self_pos),
                offsets: Arc::new(offsets),
                neighbour_pos: Arc::new(neighbour_pos),
                neighbour_ids: ids,
                isolated,
            });
        }
        Self {
            fanouts: fanouts.to_vec(),
            roots: roots.to_vec(),
            root_pos: Arc::new(root_pos),
            frontiers,
            blocks,
        }
    }

    /// Deterministic sample driven by its own seeded generator.
    pub fn with_seed(g: &AttributedGraph, roots: &[usize], fanouts: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(g, roots, fanouts, &mut rng)
    }

    /// Sampling-free computation graph using every neighbour at every hop.
    pub fn full(g: &AttributedGraph, roots: &[usize], depth: usize) -> Self {
        let fanouts = vec![usize::MAX; depth];
        // No draws are made when every fanout is unbounded.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::sample(g, roots, &fanouts, &mut rng)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Distinct nodes whose raw features are needed.
    pub fn input_nodes(&self) -> &[usize] {
        &self.frontiers[0]
    }
}
