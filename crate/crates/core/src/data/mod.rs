//! Skeleton sequences, keypoint file I/O, normalization and synthetic data.

mod io;
mod normalize;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{load_keypoints, parse_keypoints, write_keypoints, write_keypoints_string};
pub use normalize::normalize_sequence;
pub use synth::{generate_synthetic, SynthConfig};

/// One walking instance: `T x V x C` keypoints stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    frames: Vec<f64>,
    num_frames: usize,
    num_joints: usize,
    channels: usize,
    pub subject_id: String,
    pub label: usize,
    pub view: i64,
    pub condition: String,
}

impl SkeletonSequence {
    pub fn new(
        frames: Vec<f64>,
        shape: (usize, usize, usize),
        subject_id: impl Into<String>,
        label: usize,
        view: i64,
        condition: impl Into<String>,
    ) -> Result<Self> {
        let (t, v, c) = shape;
        let seq = SkeletonSequence {
            frames,
            num_frames: t,
            num_joints: v,
            channels: c,
            subject_id: subject_id.into(),
            label,
            view,
            condition: condition.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, v, c) = self.shape();
        if t < 2 || v < 2 || !(c == 2 || c == 3) {
            return Err(Error::shape(
                "skeleton_sequence",
                format!("need T >= 2, V >= 2, C in {{2, 3}}; got {t}x{v}x{c}"),
            ));
        }
        if self.frames.len() != t * v * c {
            return Err(Error::shape(
                "skeleton_sequence",
                format!("{} values for shape {t}x{v}x{c}", self.frames.len()),
            ));
        }
        if self.label > 1 {
            return Err(Error::Domain {
                op: "skeleton_sequence",
                detail: format!("label {} not in {{0, 1}}", self.label),
            });
        }
        for (n, x) in self.frames.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Domain {
                    op: "skeleton_sequence",
                    detail: format!("non-finite value at flat index {n}"),
                });
            }
            if c == 3 && n % 3 == 2 && !(0.0..=1.0).contains(x) {
                return Err(Error::Domain {
                    op: "skeleton_sequence",
                    detail: format!("confidence {x} outside [0, 1] at flat index {n}"),
                });
            }
        }
        Ok(())
    }

    /// `(T, V, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_frames, self.num_joints, self.channels)
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn at(&self, t: usize, v: usize, c: usize) -> f64 {
        self.frames[(t * self.num_joints + v) * self.channels + c]
    }

    pub(crate) fn frames_mut(&mut self) -> &mut [f64] {
        &mut self.frames
    }

    /// Applies a joint relabeling: joint `v` of the result is joint
    /// `perm_inverse[v]` of `self`, i.e. old joint `u` moves to `perm[u]`.
    pub fn permute_joints(&self, perm: &[usize]) -> Result<Self> {
        let (t, v, c) = self.shape();
        if perm.len() != v {
            return Err(Error::shape("permute_joints", "permutation length != V"));
        }
        let mut out = self.clone();
        for f in 0..t {
            for (u, &p) in perm.iter().enumerate() {
                for ch in 0..c {
                    out.frames[(f * v + p) * c + ch] = self.frames[(f * v + u) * c + ch];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<SkeletonSequence>) -> Self {
        Dataset { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.sequences {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

/// Train/test assignment by sequence index.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subject-disjoint split, stratified by the label of each subject's first
/// sequence. Roughly `test_fraction` of the subjects in each stratum go to
/// the test side.
pub fn split_by_subject(data: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("split.test_fraction", "must be in (0, 1)"));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.sequences.iter().enumerate() {
        by_subject.entry(&s.subject_id).or_default().push(i);
    }
    let mut strata: [Vec<&str>; 2] = [vec![], vec![]];
    for (subject, idx) in &by_subject {
        strata[data.sequences[idx[0]].label].push(subject);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_subjects = std::collections::BTreeSet::new();
    for stratum in &mut strata {
        stratum.shuffle(&mut rng);
        let n_test = (stratum.len() as f64 * test_fraction).round() as usize;
        test_subjects.extend(stratum.iter().take(n_test).copied());
    }
    let (mut train, mut test) = (vec![], vec![]);
    for (i, s) in data.sequences.iter().enumerate() {
        if test_subjects.contains(s.subject_id.as_str()) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    let split = Split { train, test };
    check_split(data, &split)?;
    Ok(split)
}

/// Both sides nonempty with both labels, and no subject on both sides.
pub fn check_split(data: &Dataset, split: &Split) -> Result<()> {
    for (name, side) in [("train", &split.train), ("test", &split.test)] {
        let mut seen = [false; 2];
        for &i in side {
            seen[data.sequences[i].label] = true;
        }
        if !(seen[0] && seen[1]) {
            return Err(Error::config(
                format!("split.{name}"),
                "split must contain both labels",
            ));
        }
    }
    let train_subjects: std::collections::HashSet<&str> = split
        .train
        .iter()
        .map(|&i| data.sequences[i].subject_id.as_str())
        .collect();
    if let Some(&i) = split
        .test
        .iter()
        .find(|&&i| train_subjects.contains(data.sequences[i].subject_id.as_str()))
    {
        return Err(Error::config(
            "split",
            format!("subject {} appears in train and test", data.sequences[i].subject_id),
        ));
    }
    Ok(())
}
