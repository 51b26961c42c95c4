use super::SkeletonSequence;
use crate::error::{Error, Result};
use crate::graph::JointLayout;

fn midpoint(seq: &SkeletonSequence, t: usize, (a, b): (usize, usize)) -> [f64; 2] {
    [
        0.5 * (seq.at(t, a, 0) + seq.at(t, b, 0)),
        0.5 * (seq.at(t, a, 1) + seq.at(t, b, 1)),
    ]
}

/// Translates every frame so the hip midpoint sits at the origin, then
/// scales the whole sequence so the mean hip-mid to shoulder-mid distance
/// is 1. The confidence channel is left as is.
pub fn normalize_sequence(seq: &SkeletonSequence, layout: &JointLayout) -> Result<SkeletonSequence> {
    let (t, v, c) = seq.shape();
    if layout.num_joints() != v {
        return Err(Error::shape(
            "normalize_sequence",
            format!("layout has {} joints, sequence has {v}", layout.num_joints()),
        ));
    }
    let (Some(hips), Some(shoulders)) = (layout.hips, layout.shoulders) else {
        return Err(Error::config(
            "layout",
            "normalization needs hip and shoulder joints in the layout",
        ));
    };
    let roots: Vec<[f64; 2]> = (0..t).map(|f| midpoint(seq, f, hips)).collect();
    let torso_total: f64 = (0..t)
        .map(|f| {
            let s = midpoint(seq, f, shoulders);
            (s[0] - roots[f][0]).hypot(s[1] - roots[f][1])
        })
        .sum();
    let torso = torso_total / t as f64;
    if !(torso > 0.0) {
        return Err(Error::Degenerate(format!(
            "torso length is zero in every frame of subject {}",
            seq.subject_id
        )));
    }
    let mut out = seq.clone();
    let frames = out.frames_mut();
    for (f, root) in roots.iter().enumerate() {
        for j in 0..v {
            for ch in 0..2 {
                let x = &mut frames[(f * v + j) * c + ch];
                *x = (*x - root[ch]) / torso;
            }
        }
    }
    Ok(out)
}
