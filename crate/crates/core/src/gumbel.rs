//! Gumbel noise, the Gumbel-Softmax relaxation, straight-through hard
//! samples, and per-instance edge masks built from them.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::candidate_edges;

/// Uniform draws are clamped to `[EPS, 1 - EPS]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// `n` i.i.d. standard Gumbel samples.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

/// Where Gumbel noise comes from. `Fixed` and `Zero` exist so gradient
/// checks can hold the noise still.
pub enum Noise<'a> {
    Sample(&'a mut dyn RngCore),
    Fixed(&'a [f64]),
    Zero,
}

impl Noise<'_> {
    pub fn draw(&mut self, n: usize) -> Result<Vec<f64>> {
        match self {
            Noise::Sample(rng) => Ok(sample_gumbel(n, *rng)),
            Noise::Fixed(values) => {
                if values.len() != n {
                    return Err(Error::shape(
                        "noise",
                        format!("fixed noise has {} values, need {n}", values.len()),
                    ));
                }
                Ok(values.to_vec())
            }
            Noise::Zero => Ok(vec![0.0; n]),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config("tau", format!("temperature must be > 0, got {tau}")))
    }
}

/// `softmax((logits + g) / tau)` along the last axis. Differentiable in
/// `logits`; the noise is a constant.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, noise: &mut Noise<'_>) -> Result<Var> {
    check_tau(tau)?;
    let shape = tape.shape(logits).to_vec();
    if shape.is_empty() {
        return Err(Error::shape("gumbel_softmax", "logits must have a class axis"));
    }
    let g = noise.draw(tape.value(logits).len())?;
    let g = tape.leaf_from(shape.clone(), g)?;
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(scaled, shape.len() - 1)
}

/// Forward one-hot at the argmax (lowest index on ties), backward identity.
pub fn straight_through(tape: &mut Tape, soft: Var) -> Result<Var> {
    tape.straight_through(soft)
}

/// Per-edge `(keep, drop)` logits on a tape: shape `[E, 2]` with
/// `E = V (V - 1) / 2`, rows in [`candidate_edges`] order.
#[derive(Debug, Clone, Copy)]
pub struct EdgeLogits {
    pub var: Var,
    pub num_joints: usize,
}

impl EdgeLogits {
    pub fn new(tape: &Tape, var: Var, num_joints: usize) -> Result<Self> {
        let e = num_joints * num_joints.saturating_sub(1) / 2;
        if tape.shape(var) != [e, 2] {
            return Err(Error::shape(
                "edge_logits",
                format!("expected [{e}, 2] for V = {num_joints}, got {:?}", tape.shape(var)),
            ));
        }
        if tape.value(var).iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "edge_logits",
                detail: "non-finite logit".into(),
            });
        }
        Ok(EdgeLogits { var, num_joints })
    }

    pub fn num_edges(&self) -> usize {
        self.num_joints * self.num_joints.saturating_sub(1) / 2
    }
}

/// Differentiable mask sampled from [`EdgeLogits`].
#[derive(Debug, Clone, Copy)]
pub struct SampledMask {
    /// `[V, V]`, symmetric, zero diagonal.
    pub adjacency: Var,
    /// `[E]` noise-free keep probabilities `softmax(logits)[keep]`.
    pub keep_prob: Var,
    /// `[E]` sampled keep value per edge (soft or hard).
    pub keep_sample: Var,
}

/// Two-class Gumbel-Softmax per edge; the keep component (relaxed, or
/// straight-through one-hot when `hard`) is written to `A[i][j]` and
/// `A[j][i]`.
pub fn sample_edge_mask(
    tape: &mut Tape,
    logits: EdgeLogits,
    tau: f64,
    hard: bool,
    noise: &mut Noise<'_>,
) -> Result<SampledMask> {
    let v = logits.num_joints;
    let e = logits.num_edges();
    let soft = gumbel_softmax(tape, logits.var, tau, noise)?;
    let sample = if hard { straight_through(tape, soft)? } else { soft };
    let keep_index: Vec<usize> = (0..e).map(|n| 2 * n).collect();
    let keep_sample = tape.gather(sample, &keep_index)?;
    let pairs: Vec<(usize, usize)> = candidate_edges(v)
        .enumerate()
        .flat_map(|(n, (i, j))| [(n, i * v + j), (n, j * v + i)])
        .collect();
    let adjacency = tape.scatter(keep_sample, &pairs, vec![v, v])?;
    let probs = tape.softmax(logits.var, 1)?;
    let keep_prob = tape.gather(probs, &keep_index)?;
    Ok(SampledMask {
        adjacency,
        keep_prob,
        keep_sample,
    })
}

/// `tau(t) = max(tau_min, tau0 * exp(-decay * t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, tau_min: f64, decay: f64) -> Result<Self> {
        let s = TemperatureSchedule { tau0, tau_min, decay };
        s.validate()?;
        Ok(s)
    }

    /// Decay chosen so `tau` reaches `tau_min` at 80% of `epochs`.
    pub fn reaching_min_at(tau0: f64, tau_min: f64, epochs: usize) -> Result<Self> {
        let horizon = 0.8 * epochs.max(1) as f64;
        let decay = if tau0 > tau_min {
            (tau0 / tau_min).ln() / horizon
        } else {
            0.0
        };
        Self::new(tau0, tau_min, decay)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau0).map_err(|_| Error::config("schedule.tau0", "must be > 0"))?;
        check_tau(self.tau_min).map_err(|_| Error::config("schedule.tau_min", "must be > 0"))?;
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config("schedule.decay", "must be >= 0"));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        (self.tau0 * (-self.decay * t).exp()).max(self.tau_min)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        // decay for a 50-epoch run; training rescales it to its own length
        TemperatureSchedule::reaching_min_at(5.0, 0.5, 50).expect("valid defaults")
    }
}
