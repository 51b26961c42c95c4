//! Upstream network: per-joint embedding followed by a symmetric bilinear
//! pair scorer that emits `(keep, drop)` logits for every candidate edge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::candidate_edges;
use crate::gumbel::EdgeLogits;

/// What the shared per-joint embedding sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpstreamInput {
    /// Temporal mean of every channel: `C` features per joint.
    MeanPool,
    /// The whole frame-to-frame displacement track of the joint:
    /// `(T - 1) * C` features per joint, aligned in time across joints.
    Displacement,
}

impl UpstreamInput {
    pub fn feature_dim(self, frames: usize, channels: usize) -> usize {
        match self {
            UpstreamInput::MeanPool => channels,
            UpstreamInput::Displacement => frames.saturating_sub(1) * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamParams {
    /// `[F, d_e]`
    pub embed_w: Tensor,
    /// `[d_e]`
    pub embed_b: Tensor,
    /// `[d_e, d_e]`, symmetrised as `M + M^T` when scoring.
    pub keep_form: Tensor,
    pub drop_form: Tensor,
    /// `[2]`: keep and drop biases.
    pub bias: Tensor,
}

pub struct UpstreamVars {
    embed_w: Var,
    embed_b: Var,
    keep_form: Var,
    drop_form: Var,
    bias: Var,
}

impl UpstreamParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let f = config.upstream_feature_dim();
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000);
        let embed_w = Tensor::uniform(vec![f, d], 1.0 / (f as f64).sqrt(), &mut rng);
        let keep_form = Tensor::uniform(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let drop_form = Tensor::uniform(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng);
        UpstreamParams {
            embed_w,
            embed_b: Tensor::zeros(vec![d]),
            keep_form,
            drop_form,
            bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let f = config.upstream_feature_dim();
        let d = config.embed_dim;
        UpstreamParams {
            embed_w: Tensor::zeros(vec![f, d]),
            embed_b: Tensor::zeros(vec![d]),
            keep_form: Tensor::zeros(vec![d, d]),
            drop_form: Tensor::zeros(vec![d, d]),
            bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("upstream.embed_w", &self.embed_w),
            ("upstream.embed_b", &self.embed_b),
            ("upstream.keep_form", &self.keep_form),
            ("upstream.drop_form", &self.drop_form),
            ("upstream.bias", &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.keep_form,
            &mut self.drop_form,
            &mut self.bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> UpstreamVars {
        UpstreamVars {
            embed_w: tape.leaf(&self.embed_w),
            embed_b: tape.leaf(&self.embed_b),
            keep_form: tape.leaf(&self.keep_form),
            drop_form: tape.leaf(&self.drop_form),
            bias: tape.leaf(&self.bias),
        }
    }
}

impl UpstreamVars {
    pub fn vars(&self) -> [Var; 5] {
        [self.embed_w, self.embed_b, self.keep_form, self.drop_form, self.bias]
    }
}

/// Per-joint features `[V, F]` from a `[T, V, C]` sequence on the tape.
fn joint_features(tape: &mut Tape, seq: Var, input: UpstreamInput) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let (t, v, c) = (s[0], s[1], s[2]);
    match input {
        UpstreamInput::MeanPool => {
            // [T, V, C] -> [T, V*C] -> mean over T -> [V*C] -> [V, C]
            let flat = tape.reshape(seq, vec![t, v * c])?;
            let mean = tape.mean_rows(flat)?;
            tape.reshape(mean, vec![v, c])
        }
        UpstreamInput::Displacement => {
            let n = (t - 1) * c;
            // later[v, (f, ch)] = x[f + 1, v, ch]; earlier likewise at f
            let mut later = Vec::with_capacity(v * n);
            let mut earlier = Vec::with_capacity(v * n);
            for j in 0..v {
                for f in 0..t - 1 {
                    for ch in 0..c {
                        later.push(((f + 1) * v + j) * c + ch);
                        earlier.push((f * v + j) * c + ch);
                    }
                }
            }
            let a = tape.gather(seq, &later)?;
            let b = tape.gather(seq, &earlier)?;
            let d = tape.sub(a, b)?;
            tape.reshape(d, vec![v, n])
        }
    }
}

/// Edge logits `[E, 2]` for one sequence.
pub fn upstream_forward(
    tape: &mut Tape,
    seq: Var,
    params: &UpstreamVars,
    config: &ModelConfig,
) -> Result<EdgeLogits> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 || s[1] != config.joints || s[2] != config.channels {
        return Err(Error::shape(
            "upstream_forward",
            format!(
                "sequence {s:?} does not match V = {}, C = {}",
                config.joints, config.channels
            ),
        ));
    }
    let v = config.joints;
    let feats = joint_features(tape, seq, config.upstream_input)?;
    let f = tape.shape(feats)[1];
    if tape.shape(params.embed_w)[0] != f {
        return Err(Error::shape(
            "upstream_forward",
            format!(
                "embedding expects {} features per joint, sequence gives {f}",
                tape.shape(params.embed_w)[0]
            ),
        ));
    }
    let d = config.embed_dim;
    let proj = tape.matmul(feats, params.embed_w)?;
    // broadcast the embedding bias over joints
    let bias_index: Vec<usize> = (0..v * d).map(|n| n % d).collect();
    let bias_rows = tape.gather(params.embed_b, &bias_index)?;
    let bias_rows = tape.reshape(bias_rows, vec![v, d])?;
    let emb = tape.add(proj, bias_rows)?;
    let emb_t = tape.transpose(emb)?;

    let mut scores = Vec::with_capacity(2);
    for form in [params.keep_form, params.drop_form] {
        let form_t = tape.transpose(form)?;
        let sym = tape.add(form, form_t)?;
        let left = tape.matmul(emb, sym)?;
        scores.push(tape.matmul(left, emb_t)?);
    }
    let both = tape.concat(&scores, vec![2 * v * v])?;
    let index: Vec<usize> = candidate_edges(v)
        .flat_map(|(i, j)| [i * v + j, v * v + i * v + j])
        .collect();
    let e = index.len() / 2;
    let pair_scores = tape.gather(both, &index)?;
    let bias_index: Vec<usize> = (0..2 * e).map(|n| n % 2).collect();
    let bias = tape.gather(params.bias, &bias_index)?;
    let logits = tape.add(pair_scores, bias)?;
    let logits = tape.reshape(logits, vec![e, 2])?;
    EdgeLogits::new(tape, logits, v)
}
