//! JSON-lines keypoint files, one sequence per line:
//!
//! ```text
//! {"subject": "001", "label": 0, "view": 90, "condition": "nm-01", "frames": [[[x, y, conf], ...], ...]}
//! ```

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{Dataset, SkeletonSequence};
use crate::error::{Error, Result};

fn parse_err(line: usize, field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.into(),
        detail: detail.into(),
    }
}

pub fn load_keypoints(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text)
}

/// Parses a whole file body. Blank lines are skipped; line numbers are 1-based.
pub fn parse_keypoints(text: &str) -> Result<Dataset> {
    let mut sequences = vec![];
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_record(line, n + 1)?);
    }
    Ok(Dataset::new(sequences))
}

fn parse_record(line: &str, lineno: usize) -> Result<SkeletonSequence> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| parse_err(lineno, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(lineno, "<record>", "expected a JSON object"))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| parse_err(lineno, name, "missing field"));

    let subject = field("subject")?
        .as_str()
        .ok_or_else(|| parse_err(lineno, "subject", "expected a string"))?
        .to_string();
    let label = match field("label")?.as_u64() {
        Some(l @ (0 | 1)) => l as usize,
        _ => return Err(parse_err(lineno, "label", "expected 0 or 1")),
    };
    let view = field("view")?
        .as_i64()
        .ok_or_else(|| parse_err(lineno, "view", "expected an integer"))?;
    let condition = field("condition")?
        .as_str()
        .ok_or_else(|| parse_err(lineno, "condition", "expected a string"))?
        .to_string();
    let frames = field("frames")?
        .as_array()
        .ok_or_else(|| parse_err(lineno, "frames", "expected an array of frames"))?;

    let mut shape: Option<(usize, usize)> = None;
    let mut data = vec![];
    for (t, frame) in frames.iter().enumerate() {
        let joints = frame
            .as_array()
            .ok_or_else(|| parse_err(lineno, format!("frames[{t}]"), "expected an array of joints"))?;
        for (v, joint) in joints.iter().enumerate() {
            let coords = joint.as_array().ok_or_else(|| {
                parse_err(lineno, format!("frames[{t}][{v}]"), "expected an array of channels")
            })?;
            let c = coords.len();
            match shape {
                None => shape = Some((joints.len(), c)),
                Some((ev, ec)) => {
                    if joints.len() != ev {
                        return Err(parse_err(
                            lineno,
                            format!("frames[{t}]"),
                            format!("ragged frame: {} joints, expected {ev}", joints.len()),
                        ));
                    }
                    if c != ec {
                        return Err(parse_err(
                            lineno,
                            format!("frames[{t}][{v}]"),
                            format!("ragged joint: {c} channels, expected {ec}"),
                        ));
                    }
                }
            }
            for (ch, x) in coords.iter().enumerate() {
                let x = x.as_f64().ok_or_else(|| {
                    parse_err(lineno, format!("frames[{t}][{v}][{ch}]"), "expected a number")
                })?;
                data.push(x);
            }
        }
        if joints.is_empty() {
            return Err(parse_err(lineno, format!("frames[{t}]"), "frame has no joints"));
        }
    }
    let (v, c) = shape.unwrap_or((0, 0));
    SkeletonSequence::new(data, (frames.len(), v, c), subject, label, view, condition)
        .map_err(|e| parse_err(lineno, "frames", e.to_string()))
}

#[derive(Serialize)]
struct Record<'a> {
    subject: &'a str,
    label: usize,
    view: i64,
    condition: &'a str,
    frames: Vec<Vec<&'a [f64]>>,
}

/// Serializes a dataset in the same format [`parse_keypoints`] reads, with
/// keys in `subject, label, view, condition, frames` order.
pub fn write_keypoints_string(data: &Dataset) -> String {
    let mut out = String::new();
    for s in &data.sequences {
        let (t, v, c) = s.shape();
        let frames = (0..t)
            .map(|f| (0..v).map(|j| &s.frames()[(f * v + j) * c..(f * v + j + 1) * c]).collect())
            .collect();
        let rec = Record {
            subject: &s.subject_id,
            label: s.label,
            view: s.view,
            condition: &s.condition,
            frames,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_keypoints(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_keypoints_string(data)).map_err(|e| Error::io(path, e))
}
