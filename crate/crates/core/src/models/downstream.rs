//! Downstream spatio-temporal GCN classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// `[C_in, C_out]`
    pub spatial: Tensor,
    /// `[C_out, k_t]`, one temporal kernel per channel.
    pub temporal: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamParams {
    pub layers: Vec<GcnLayer>,
    /// `[C_last, 2]`
    pub head_w: Tensor,
    /// `[2]`
    pub head_b: Tensor,
}

pub struct GcnLayerVars {
    pub spatial: Var,
    pub temporal: Var,
}

pub struct DownstreamVars {
    pub layers: Vec<GcnLayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

fn layer_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl DownstreamParams {
    /// Uniform(-s, s) weights with `s = 1 / sqrt(fan_in)`; layer `n` draws
    /// from its own stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let k = config.temporal_kernel;
        let mut layers = vec![];
        let mut c_in = config.channels;
        for (n, &c_out) in config.hidden.iter().enumerate() {
            let mut rng = layer_rng(seed, n as u64);
            layers.push(GcnLayer {
                spatial: Tensor::uniform(vec![c_in, c_out], 1.0 / (c_in as f64).sqrt(), &mut rng),
                temporal: Tensor::uniform(vec![c_out, k], 1.0 / (k as f64).sqrt(), &mut rng),
            });
            c_in = c_out;
        }
        let mut rng = layer_rng(seed, config.hidden.len() as u64);
        let bound = 1.0 / (c_in as f64).sqrt();
        DownstreamParams {
            layers,
            head_w: Tensor::uniform(vec![c_in, 2], bound, &mut rng),
            head_b: Tensor::uniform(vec![2], bound, &mut rng),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![];
        for (n, l) in self.layers.iter().enumerate() {
            out.push((format!("downstream.layer{n}.spatial"), &l.spatial));
            out.push((format!("downstream.layer{n}.temporal"), &l.temporal));
        }
        out.push(("downstream.head_w".into(), &self.head_w));
        out.push(("downstream.head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![];
        for l in &mut self.layers {
            out.push(&mut l.spatial);
            out.push(&mut l.temporal);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> DownstreamVars {
        DownstreamVars {
            layers: self
                .layers
                .iter()
                .map(|l| GcnLayerVars {
                    spatial: tape.leaf(&l.spatial),
                    temporal: tape.leaf(&l.temporal),
                })
                .collect(),
            head_w: tape.leaf(&self.head_w),
            head_b: tape.leaf(&self.head_b),
        }
    }
}

impl DownstreamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|l| [l.spatial, l.temporal]).collect();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Differentiable `D^{-1/2} (A + I) D^{-1/2}` of a `[V, V]` mask.
pub fn normalize_adjacency_on_tape(tape: &mut Tape, mask: Var) -> Result<Var> {
    let s = tape.shape(mask).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("normalize_adjacency", format!("expected square, got {s:?}")));
    }
    let v = s[0];
    let eye = tape.leaf(&Tensor::identity(v));
    let with_loops = tape.add(mask, eye)?;
    let ones = tape.leaf(&Tensor::new(vec![v, 1], vec![1.0; v])?);
    let degree = tape.matmul(with_loops, ones)?;
    let log_degree = tape.log(degree)?;
    let half = tape.scale(log_degree, -0.5);
    let inv_sqrt = tape.exp(half);
    let inv_sqrt_t = tape.transpose(inv_sqrt)?;
    let outer = tape.matmul(inv_sqrt, inv_sqrt_t)?;
    tape.mul(with_loops, outer)
}

/// Per frame `relu(A_hat x_t W)`, then depthwise temporal convolution.
pub fn gcn_block(tape: &mut Tape, x: Var, a_hat: Var, layer: &GcnLayerVars) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(layer.spatial).to_vec();
    if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[0] {
        return Err(Error::shape(
            "gcn_block",
            format!("features {sx:?} incompatible with spatial weights {sw:?}"),
        ));
    }
    let (t, v, c_in) = (sx[0], sx[1], sx[2]);
    let c_out = sw[1];
    // (A x) W == A (x W); aggregate on whichever side has fewer channels
    let projected = if c_in <= c_out {
        let mixed = tape.node_mix(a_hat, x)?;
        let flat = tape.reshape(mixed, vec![t * v, c_in])?;
        let out = tape.matmul(flat, layer.spatial)?;
        tape.reshape(out, vec![t, v, c_out])?
    } else {
        let flat = tape.reshape(x, vec![t * v, c_in])?;
        let out = tape.matmul(flat, layer.spatial)?;
        let out = tape.reshape(out, vec![t, v, c_out])?;
        tape.node_mix(a_hat, out)?
    };
    let activated = tape.relu(projected);
    tape.temporal_conv(activated, layer.temporal)
}

/// Normalizes `mask`, runs the GCN stack, pools over frames and joints and
/// applies the linear head. Returns `[2]` logits.
pub fn downstream_forward(
    tape: &mut Tape,
    seq: Var,
    mask: Var,
    params: &DownstreamVars,
) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let sm = tape.shape(mask).to_vec();
    if s.len() != 3 || sm != [s[1], s[1]] {
        return Err(Error::shape(
            "downstream_forward",
            format!("sequence {s:?} incompatible with mask {sm:?}"),
        ));
    }
    let a_hat = normalize_adjacency_on_tape(tape, mask)?;
    let mut x = seq;
    for layer in &params.layers {
        x = gcn_block(tape, x, a_hat, layer)?;
    }
    let pooled = tape.mean_rows(x)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    let logits = tape.matmul(row, params.head_w)?;
    let logits = tape.reshape(logits, vec![2])?;
    tape.add(logits, params.head_b)
}
