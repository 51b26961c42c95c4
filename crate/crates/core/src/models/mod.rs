//! The upstream edge scorer, the downstream ST-GCN classifier, and the glue
//! that runs one sequence through both.

mod checkpoint;
mod downstream;
mod upstream;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};
use crate::graph::{build_anatomy_graph, candidate_edges, AdjacencyMatrix, JointLayout};
use crate::gumbel::{sample_edge_mask, Noise, SampledMask};

pub use checkpoint::Checkpoint;
pub use downstream::{
    downstream_forward, gcn_block, normalize_adjacency_on_tape, DownstreamParams, DownstreamVars,
    GcnLayer, GcnLayerVars,
};
pub use upstream::{upstream_forward, UpstreamInput, UpstreamParams, UpstreamVars};

/// How the downstream graph is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// The sampled per-instance mask replaces the anatomy graph.
    Learned,
    /// Sampled mask plus the anatomy graph (residual add).
    LearnedPlusAnatomy,
    /// Fixed anatomy graph; the upstream network is unused.
    Anatomy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub joints: usize,
    pub channels: usize,
    pub frames: usize,
    pub embed_dim: usize,
    pub upstream_input: UpstreamInput,
    pub hidden: Vec<usize>,
    pub temporal_kernel: usize,
    pub graph_mode: GraphMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 17,
            channels: 3,
            frames: 30,
            embed_dim: 16,
            upstream_input: UpstreamInput::Displacement,
            hidden: vec![16, 32, 64],
            temporal_kernel: 9,
            graph_mode: GraphMode::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints < 2 {
            return Err(Error::config("model.joints", "must be >= 2"));
        }
        if !(self.channels == 2 || self.channels == 3) {
            return Err(Error::config("model.channels", "must be 2 or 3"));
        }
        if self.frames < 2 {
            return Err(Error::config("model.frames", "must be >= 2"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one nonzero layer width"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("model.temporal_kernel", "must be odd"));
        }
        Ok(())
    }

    pub fn upstream_feature_dim(&self) -> usize {
        self.upstream_input.feature_dim(self.frames, self.channels)
    }

    pub fn num_edges(&self) -> usize {
        self.joints * (self.joints - 1) / 2
    }
}

/// Both networks plus what is needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: JointLayout,
    pub upstream: UpstreamParams,
    pub downstream: DownstreamParams,
}

/// Tape handles for all parameters of a [`Model`].
pub struct BoundModel {
    pub upstream: UpstreamVars,
    pub downstream: DownstreamVars,
    anatomy: Option<Var>,
}

impl BoundModel {
    /// Parameter vars in [`Model::tensors_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.upstream.vars().to_vec();
        v.extend(self.downstream.vars());
        v
    }
}

/// Result of one training-mode forward pass.
pub struct InstanceOutput {
    pub logits: Var,
    /// `None` in [`GraphMode::Anatomy`].
    pub mask: Option<SampledMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: [f64; 2],
    /// Noise-free keep probability per candidate edge.
    pub edge_keep_probs: Vec<f64>,
    /// The discrete graph the downstream network saw.
    pub graph: AdjacencyMatrix,
}

impl Model {
    pub fn new(config: ModelConfig, layout: JointLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        if layout.num_joints() != config.joints {
            return Err(Error::config(
                "layout",
                format!("layout has {} joints, model expects {}", layout.num_joints(), config.joints),
            ));
        }
        Ok(Model {
            upstream: UpstreamParams::init(&config, seed),
            downstream: DownstreamParams::init(&config, seed),
            config,
            layout,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .upstream
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        out.extend(self.downstream.named());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.upstream.tensors_mut();
        out.extend(self.downstream.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let anatomy = match self.config.graph_mode {
            GraphMode::Learned => None,
            GraphMode::Anatomy | GraphMode::LearnedPlusAnatomy => {
                let a = build_anatomy_graph(&self.layout)?;
                Some(tape.leaf_from(vec![a.size(), a.size()], a.entries().to_vec())?)
            }
        };
        Ok(BoundModel {
            upstream: self.upstream.bind(tape),
            downstream: self.downstream.bind(tape),
            anatomy,
        })
    }

    pub fn check_sequence(&self, seq: &SkeletonSequence) -> Result<()> {
        let (t, v, c) = seq.shape();
        let frames_ok = match self.config.upstream_input {
            UpstreamInput::Displacement => t == self.config.frames,
            UpstreamInput::MeanPool => true,
        };
        if v != self.config.joints || c != self.config.channels || !frames_ok {
            return Err(Error::shape(
                "model",
                format!(
                    "sequence {t}x{v}x{c} does not match model (T = {}, V = {}, C = {})",
                    self.config.frames, self.config.joints, self.config.channels
                ),
            ));
        }
        Ok(())
    }

    pub fn sequence_leaf(&self, tape: &mut Tape, seq: &SkeletonSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        let (t, v, c) = seq.shape();
        tape.leaf_from(vec![t, v, c], seq.frames().to_vec())
    }

    /// Upstream, sampled mask, downstream. `hard` selects straight-through
    /// samples; `noise` supplies the Gumbel perturbation.
    pub fn forward_instance(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        seq: &SkeletonSequence,
        tau: f64,
        hard: bool,
        noise: &mut Noise<'_>,
    ) -> Result<InstanceOutput> {
        let x = self.sequence_leaf(tape, seq)?;
        let (graph, mask) = match self.config.graph_mode {
            GraphMode::Anatomy => (bound.anatomy.expect("bound with anatomy"), None),
            mode => {
                let logits = upstream_forward(tape, x, &bound.upstream, &self.config)?;
                let mask = sample_edge_mask(tape, logits, tau, hard, noise)?;
                let graph = match mode {
                    GraphMode::LearnedPlusAnatomy => {
                        tape.add(mask.adjacency, bound.anatomy.expect("bound with anatomy"))?
                    }
                    _ => mask.adjacency,
                };
                (graph, Some(mask))
            }
        };
        let logits = downstream_forward(tape, x, graph, &bound.downstream)?;
        Ok(InstanceOutput { logits, mask })
    }

    /// Noise-free upstream keep probabilities and the discrete graph
    /// (keep iff keep logit > drop logit).
    pub fn predict_graph(&self, seq: &SkeletonSequence) -> Result<(Vec<f64>, AdjacencyMatrix)> {
        let v = self.config.joints;
        if self.config.graph_mode == GraphMode::Anatomy {
            let a = build_anatomy_graph(&self.layout)?;
            let probs = candidate_edges(v).map(|(i, j)| a.get(i, j)).collect();
            return Ok((probs, a));
        }
        let mut tape = Tape::new();
        let x = self.sequence_leaf(&mut tape, seq)?;
        let up = self.upstream.bind(&mut tape);
        let logits = upstream_forward(&mut tape, x, &up, &self.config)?;
        let l = tape.value(logits.var);
        let mut graph = AdjacencyMatrix::zeros(v);
        let mut probs = Vec::with_capacity(logits.num_edges());
        for (n, (i, j)) in candidate_edges(v).enumerate() {
            let (keep, drop) = (l[2 * n], l[2 * n + 1]);
            probs.push(1.0 / (1.0 + (drop - keep).exp()));
            if keep > drop {
                graph.set_symmetric(i, j, 1.0);
            }
        }
        Ok((probs, graph))
    }

    /// Downstream logits for `seq` on a fixed mask (before any residual add).
    pub fn logits_on_graph(&self, seq: &SkeletonSequence, mask: &AdjacencyMatrix) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let x = self.sequence_leaf(&mut tape, seq)?;
        let mut m = tape.leaf_from(vec![mask.size(), mask.size()], mask.entries().to_vec())?;
        if self.config.graph_mode == GraphMode::LearnedPlusAnatomy {
            let a = build_anatomy_graph(&self.layout)?;
            let a = tape.leaf_from(vec![a.size(), a.size()], a.entries().to_vec())?;
            m = tape.add(m, a)?;
        }
        let down = self.downstream.bind(&mut tape);
        let logits = downstream_forward(&mut tape, x, m, &down)?;
        let l = tape.value(logits);
        Ok([l[0], l[1]])
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, seq: &SkeletonSequence) -> Result<Prediction> {
        let (edge_keep_probs, graph) = self.predict_graph(seq)?;
        let logits = self.logits_on_graph(seq, &graph)?;
        Ok(Prediction {
            label: argmax(&logits),
            logits,
            edge_keep_probs,
            graph,
        })
    }
}
