//! Planted-structure synthetic gait data.
//!
//! Every joint follows an independent Gaussian random walk. In class-1
//! sequences joint `j` instead copies joint `i` with a lag:
//! `frames[t][j] = frames[t - lag][i] + eps` for `t >= lag`, where
//! `eps ~ N(0, noise^2)`. Class-0 sequences keep all joints independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SkeletonSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    /// 2 (x, y) or 3 (x, y, confidence = 1).
    pub channels: usize,
    pub planted: (usize, usize),
    pub lag: usize,
    pub noise: f64,
    /// Standard deviation of each random-walk increment.
    pub step_std: f64,
    /// Standard deviation of each joint's starting coordinate.
    pub init_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class: 300,
            frames: 30,
            joints: 17,
            channels: 3,
            planted: (7, 9),
            lag: 1,
            noise: 0.05,
            step_std: 0.2,
            init_std: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (i, j) = self.planted;
        if self.n_per_class < 1 {
            return Err(Error::config("synth.n_per_class", "must be >= 1"));
        }
        if self.frames < 2 || self.joints < 2 {
            return Err(Error::config("synth.frames", "need frames >= 2 and joints >= 2"));
        }
        if !(self.channels == 2 || self.channels == 3) {
            return Err(Error::config("synth.channels", "must be 2 or 3"));
        }
        if i >= self.joints || j >= self.joints {
            return Err(Error::config("synth.planted", "joint index out of range"));
        }
        if i == j {
            return Err(Error::config("synth.planted", "planted pair must be two distinct joints"));
        }
        if self.lag < 1 || self.lag >= self.frames {
            return Err(Error::config("synth.lag", "need 1 <= lag < frames"));
        }
        for (field, v) in [
            ("synth.noise", self.noise),
            ("synth.step_std", self.step_std),
            ("synth.init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Generates `2 * n_per_class` sequences, alternating labels 0, 1, 0, 1, ...
/// Each sequence gets its own subject id. Deterministic in `seed`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, config.step_std).expect("validated std");
    let init = Normal::new(0.0, config.init_std).expect("validated std");
    let eps = Normal::new(0.0, config.noise).expect("validated std");
    let (t, v, c) = (config.frames, config.joints, config.channels);
    let (pi, pj) = config.planted;
    let mut sequences = Vec::with_capacity(2 * config.n_per_class);
    for n in 0..2 * config.n_per_class {
        let label = n % 2;
        let mut frames = vec![0.0; t * v * c];
        let idx = |f: usize, j: usize, ch: usize| (f * v + j) * c + ch;
        for j in 0..v {
            for ch in 0..2 {
                let mut x = init.sample(&mut rng);
                for f in 0..t {
                    if f > 0 {
                        x += step.sample(&mut rng);
                    }
                    frames[idx(f, j, ch)] = x;
                }
            }
            if c == 3 {
                for f in 0..t {
                    frames[idx(f, j, 2)] = 1.0;
                }
            }
        }
        if label == 1 {
            for f in config.lag..t {
                for ch in 0..2 {
                    let noise = if config.noise > 0.0 { eps.sample(&mut rng) } else { 0.0 };
                    frames[idx(f, pj, ch)] = frames[idx(f - config.lag, pi, ch)] + noise;
                }
            }
        }
        sequences.push(SkeletonSequence::new(
            frames,
            (t, v, c),
            format!("syn{n:05}"),
            label,
            90,
            "synthetic",
        )?);
    }
    Ok(Dataset::new(sequences))
}
