//! Representation learner: two mean-aggregator GraphSAGE layers followed by
//! a two-layer projection network (ReLU between, linear output).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NeighbourSample};
use crate::numeric::{Dense, Matrix, ParamGroup, Tape, Var};

/// How a GraphSAGE layer combines a node's own state with its neighbour mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorCombine {
    /// `h W_self + mean(h_N) W_neigh + b`
    #[default]
    Sum,
    /// `[h ‖ mean(h_N)] W + b`
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub combine: AggregatorCombine,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 64,
            combine: AggregatorCombine::Sum,
        }
    }
}

/// Number of GraphSAGE layers.
pub const SAGE_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
enum SageWeights {
    Sum { w_self: ParamGroup, w_neigh: ParamGroup },
    Concat { w: ParamGroup },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    weights: SageWeights,
    bias: ParamGroup,
}

impl SageLayer {
    fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, combine: AggregatorCombine, rng: &mut R) -> Self {
        let weights = match combine {
            AggregatorCombine::Sum => SageWeights::Sum {
                w_self: ParamGroup::new(format!("{name}.w_self"), Matrix::glorot(inputs, outputs, rng)),
                w_neigh: ParamGroup::new(format!("{name}.w_neigh"), Matrix::glorot(inputs, outputs, rng)),
            },
            AggregatorCombine::Concat => SageWeights::Concat {
                w: ParamGroup::new(format!("{name}.w_concat"), Matrix::glorot(2 * inputs, outputs, rng)),
            },
        };
        Self {
            weights,
            bias: ParamGroup::new(format!("{name}.b"), Matrix::zeros(1, outputs)),
        }
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, own: Var, neigh: Var) -> Result<Var> {
        let pre = match &self.weights {
            SageWeights::Sum { w_self, w_neigh } => {
                let ws = tape.param(w_self);
                let wn = tape.param(w_neigh);
                let a = tape.matmul(own, ws)?;
                let b = tape.matmul(neigh, wn)?;
                tape.add(a, b)?
            }
            SageWeights::Concat { w } => {
                let w = tape.param(w);
                let cat = tape.concat_cols(own, neigh)?;
                tape.matmul(cat, w)?
            }
        };
        let b = tape.param(&self.bias);
        let pre = tape.add_row(pre, b)?;
        Ok(tape.relu(pre))
    }

    fn params(&self) -> Vec<&ParamGroup> {
        match &self.weights {
            SageWeights::Sum { w_self, w_neigh } => vec![w_self, w_neigh, &self.bias],
            SageWeights::Concat { w } => vec![w, &self.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
        match &mut self.weights {
            SageWeights::Sum { w_self, w_neigh } => vec![w_self, w_neigh, &mut self.bias],
            SageWeights::Concat { w } => vec![w, &mut self.bias],
        }
    }
}

/// The encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    sage: Vec<SageLayer>,
    proj1: Dense,
    proj2: Dense,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let sage = (0..SAGE_DEPTH)
            .map(|l| {
                let inputs = if l == 0 { config.input_dim } else { h };
                SageLayer::new(&format!("encoder.sage{}", l + 1), inputs, h, config.combine, rng)
            })
            .collect();
        Self {
            config,
            sage,
            proj1: Dense::new("encoder.proj1", h, h, rng),
            proj2: Dense::new("encoder.proj2", h, h, rng),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn depth(&self) -> usize {
        self.sage.len()
    }

    /// Records the encoder on `tape`; output row `i` is `z` of `sample.roots[i]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, g: &AttributedGraph, sample: &NeighbourSample) -> Result<Var> {
        if g.feature_dim() != self.config.input_dim {
            return Err(Error::Shape {
                op: "encode",
                left: format!("graph feature dim {}", g.feature_dim()),
                right: format!("encoder input dim {}", self.config.input_dim),
            });
        }
        if sample.depth() != self.sage.len() {
            return Err(Error::Shape {
                op: "encode",
                left: format!("sample depth {}", sample.depth()),
                right: format!("encoder depth {}", self.sage.len()),
            });
        }
        let mut h = tape.constant(g.features().select_rows(sample.input_nodes()));
        for (layer, block) in self.sage.iter().zip(&sample.blocks) {
            let own = tape.gather(h, block.self_pos.clone())?;
            let neigh = tape.segment_mean(h, block.offsets.clone(), block.neighbour_pos.clone())?;
            h = layer.forward(tape, own, neigh)?;
        }
        let p = self.proj1.forward(tape, h)?;
        let p = tape.relu(p);
        let z = self.proj2.forward(tape, p)?;
        tape.gather(z, sample.root_pos.clone())
    }

    /// Embeddings of `sample.roots` without recording gradients.
    pub fn embed(&self, g: &AttributedGraph, sample: &NeighbourSample) -> Result<Matrix> {
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, g, sample)?;
        Ok(tape.value(z).clone())
    }

    /// Sampling-free embeddings using every neighbour.
    pub fn embed_full(&self, g: &AttributedGraph, nodes: &[usize]) -> Result<Matrix> {
        let sample = NeighbourSample::full(g, nodes, self.depth());
        self.embed(g, &sample)
    }

    pub fn params(&self) -> Vec<&ParamGroup> {
        let mut out: Vec<&ParamGroup> = self.sage.iter().flat_map(|l| l.params()).collect();
        out.extend(self.proj1.params());
        out.extend(self.proj2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out: Vec<&mut ParamGroup> = self.sage.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.extend(self.proj1.params_mut());
        out.extend(self.proj2.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthConfig;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(input_dim: usize, seed: u64) -> Encoder {
        Encoder::new(EncoderConfig::new(input_dim), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_features_zero_bias_gives_zero() {
        let g = AttributedGraph::from_edges(Matrix::zeros(4, 3), &[(0, 1), (1, 2)], vec![0; 4]).unwrap();
        let z = encoder(3, 1).embed_full(&g, &[0, 1, 2, 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), (4, 64));
    }

    #[test]
    fn isolated_node_uses_self_path_only() {
        let feats = Matrix::from_rows(&[&[1.0, -0.5], &[0.3, 0.2]]);
        let g = AttributedGraph::from_edges(feats.clone(), &[], vec![0; 2]).unwrap();
        let enc = encoder(2, 3);
        let z = enc.embed_full(&g, &[0]).unwrap();

        // Same computation with the neighbour term dropped by hand.
        let SageWeights::Sum { w_self: ws1, .. } = &enc.sage[0].weights else { unreachable!() };
        let SageWeights::Sum { w_self: ws2, .. } = &enc.sage[1].weights else { unreachable!() };
        let x = Matrix::row_vector(feats.row(0));
        let relu_affine = |x: &Matrix, w: &Matrix, b: &Matrix| x.matmul(w).unwrap().add(b).unwrap().map(|v| v.max(0.0));
        let h1 = relu_affine(&x, &ws1.value, &enc.sage[0].bias.value);
        let h2 = relu_affine(&h1, &ws2.value, &enc.sage[1].bias.value);
        let p = relu_affine(&h2, &enc.proj1.weight.value, &enc.proj1.bias.value);
        let out = p.matmul(&enc.proj2.weight.value).unwrap().add(&enc.proj2.bias.value).unwrap();
        for (a, b) in z.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn star_hub_first_layer_matches_hand_mean() {
        // Hub 0 with leaves 1..3, one-hot features.
        let feats = Matrix::identity(4);
        let g = AttributedGraph::from_edges(feats, &[(0, 1), (0, 2), (0, 3)], vec![0; 4]).unwrap();
        let mut enc = encoder(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        enc.sage[0].bias.value = Matrix::glorot(1, 64, &mut rng);
        let sample = NeighbourSample::full(&g, &[0], 2);
        let mut tape = Tape::new();
        let h0 = tape.constant(g.features().select_rows(sample.input_nodes()));
        let b = &sample.blocks[0];
        let own = tape.gather(h0, b.self_pos.clone()).unwrap();
        let neigh = tape.segment_mean(h0, b.offsets.clone(), b.neighbour_pos.clone()).unwrap();
        let h1 = enc.sage[0].forward(&mut tape, own, neigh).unwrap();
        let hub_row = b.nodes.iter().position(|&v| v == 0).unwrap();
        let got = tape.value(h1).row(hub_row).to_vec();

        let SageWeights::Sum { w_self, w_neigh } = &enc.sage[0].weights else { unreachable!() };
        for j in 0..64 {
            // one-hot self = row 0 of W_self; neighbour mean = (rows 1+2+3)/3 of W_neigh
            let mean = (w_neigh.value.get(1, j) + w_neigh.value.get(2, j) + w_neigh.value.get(3, j)) / 3.0;
            let expected = (w_self.value.get(0, j) + mean + enc.sage[0].bias.value.get(0, j)).max(0.0);
            assert!((got[j] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn feature_dim_mismatch_is_shape_error() {
        let g = SynthConfig::small(40).generate(0).unwrap();
        let enc = encoder(g.feature_dim() + 1, 0);
        assert!(matches!(enc.embed_full(&g, &[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn permutation_and_neighbour_order_invariance() {
        let g = SynthConfig::small(80).generate(1).unwrap();
        let enc = encoder(g.feature_dim(), 2);
        let nodes: Vec<usize> = (0..20).collect();
        let z = enc.embed_full(&g, &nodes).unwrap();
        let mut perm = nodes.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let zp = enc.embed_full(&g, &perm).unwrap();
        for (i, &v) in perm.iter().enumerate() {
            assert_eq!(zp.row(i), z.row(v));
        }

        // Shuffle every sampled neighbour list in place.
        let mut sample = NeighbourSample::full(&g, &nodes, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for block in &mut sample.blocks {
            let mut pos = (*block.neighbour_pos).clone();
            for i in 0..block.nodes.len() {
                pos[block.offsets[i]..block.offsets[i + 1]].shuffle(&mut rng);
            }
            block.neighbour_pos = std::sync::Arc::new(pos);
        }
        let zs = enc.embed(&g, &sample).unwrap();
        for (a, b) in zs.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_neighbourhood_is_deterministic() {
        let g = SynthConfig::small(60).generate(2).unwrap();
        let enc = encoder(g.feature_dim(), 9);
        let nodes: Vec<usize> = (0..g.num_nodes()).collect();
        let fanout = g.max_degree();
        let a = enc.embed(&g, &NeighbourSample::with_seed(&g, &nodes, &[fanout, fanout], 1)).unwrap();
        let b = enc.embed(&g, &NeighbourSample::with_seed(&g, &nodes, &[fanout, fanout], 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, enc.embed_full(&g, &nodes).unwrap());
    }

    #[test]
    fn concat_variant_runs() {
        let g = SynthConfig::small(40).generate(0).unwrap();
        let cfg = EncoderConfig {
            combine: AggregatorCombine::Concat,
            ..EncoderConfig::new(g.feature_dim())
        };
        let enc = Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(enc.embed_full(&g, &[0, 1]).unwrap().shape(), (2, 64));
        assert!(enc.params().iter().any(|p| p.name == "encoder.sage1.w_concat"));
    }
}
