//! Aggregating predicted graphs into edge frequencies, plus DOT/CSV output
//! and comparison against a fixed baseline graph.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, SkeletonSequence};
use crate::error::{Error, Result};
use crate::graph::{candidate_edges, AdjacencyMatrix, JointLayout};
use crate::models::Model;

/// Fraction of instances whose predicted graph contains each edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFrequencyMatrix {
    size: usize,
    counts: Vec<u64>,
    instances: usize,
}

impl EdgeFrequencyMatrix {
    pub fn empty(size: usize) -> Self {
        EdgeFrequencyMatrix {
            size,
            counts: vec![0; size * size],
            instances: 0,
        }
    }

    /// Adds one discrete graph; any nonzero off-diagonal entry counts as an edge.
    pub fn accumulate(&mut self, graph: &AdjacencyMatrix) -> Result<()> {
        if graph.size() != self.size {
            return Err(Error::shape(
                "edge_frequency",
                format!("graph has {} joints, expected {}", graph.size(), self.size),
            ));
        }
        for (i, j) in candidate_edges(self.size) {
            if graph.get(i, j) != 0.0 {
                self.counts[i * self.size + j] += 1;
                self.counts[j * self.size + i] += 1;
            }
        }
        self.instances += 1;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.instances == 0 {
            return 0.0;
        }
        self.counts[i * self.size + j] as f64 / self.instances as f64
    }

    /// Dense row-major copy.
    pub fn to_matrix(&self) -> Vec<f64> {
        (0..self.size * self.size)
            .map(|n| self.get(n / self.size, n % self.size))
            .collect()
    }

    /// Edges whose frequency is at least `threshold`, in `(i, j)` order.
    pub fn thresholded(&self, threshold: f64) -> Result<Vec<(usize, usize)>> {
        check_threshold(threshold)?;
        Ok(candidate_edges(self.size)
            .filter(|&(i, j)| self.get(i, j) >= threshold)
            .collect())
    }

    /// Header row of joint names, then one row of frequencies per joint.
    pub fn to_csv(&self, layout: &JointLayout) -> Result<String> {
        self.check_layout(layout)?;
        let mut out = layout.joints.join(",");
        out.push('\n');
        for i in 0..self.size {
            let row: Vec<String> = (0..self.size).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    /// DOT text with one undirected edge per entry `>= threshold`.
    pub fn to_dot(&self, layout: &JointLayout, threshold: f64) -> Result<String> {
        self.check_layout(layout)?;
        let edges = self.thresholded(threshold)?;
        let mut out = String::from("graph G {\n  node [shape=circle];\n");
        for name in &layout.joints {
            let _ = writeln!(out, "  {};", quote(name));
        }
        for (i, j) in edges {
            let _ = writeln!(
                out,
                "  {} -- {} [weight={}];",
                quote(&layout.joints[i]),
                quote(&layout.joints[j]),
                self.get(i, j)
            );
        }
        out.push_str("}\n");
        Ok(out)
    }

    fn check_layout(&self, layout: &JointLayout) -> Result<()> {
        if layout.num_joints() != self.size {
            return Err(Error::shape(
                "export",
                format!("layout has {} joints, matrix has {}", layout.num_joints(), self.size),
            ));
        }
        Ok(())
    }
}

fn quote(name: &str) -> String {
    format!("\"{}\"", name.replace('\\', "\\\\").replace('"', "\\\""))
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("threshold", format!("{threshold} is outside [0, 1]")));
    }
    Ok(())
}

/// Pooled and per-class edge frequencies of a trained model's noise-free graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFrequencies {
    pub pooled: EdgeFrequencyMatrix,
    pub per_class: [EdgeFrequencyMatrix; 2],
}

pub fn edge_frequency(data: &Dataset, model: &Model) -> Result<EdgeFrequencies> {
    edge_frequency_of(&data.sequences, model)
}

pub fn edge_frequency_of(sequences: &[SkeletonSequence], model: &Model) -> Result<EdgeFrequencies> {
    if sequences.is_empty() {
        return Err(Error::config("split", "cannot aggregate graphs over an empty split"));
    }
    let v = model.config.joints;
    let mut out = EdgeFrequencies {
        pooled: EdgeFrequencyMatrix::empty(v),
        per_class: [EdgeFrequencyMatrix::empty(v), EdgeFrequencyMatrix::empty(v)],
    };
    for seq in sequences {
        let (_, graph) = model.predict_graph(seq)?;
        out.pooled.accumulate(&graph)?;
        out.per_class[seq.label].accumulate(&graph)?;
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn export_graph(
    matrix: &EdgeFrequencyMatrix,
    layout: &JointLayout,
    threshold: f64,
    path: &Path,
) -> Result<()> {
    write_text(path, &matrix.to_dot(layout, threshold)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphDiff {
    /// In the thresholded learned graph but not the baseline.
    pub added: Vec<(usize, usize)>,
    /// In the baseline but not the thresholded learned graph.
    pub removed: Vec<(usize, usize)>,
    pub kept: Vec<(usize, usize)>,
}

impl GraphDiff {
    pub fn to_csv(&self, layout: &JointLayout) -> String {
        let mut out = String::from("status,joint_a,joint_b\n");
        for (status, edges) in [("added", &self.added), ("removed", &self.removed), ("kept", &self.kept)] {
            for &(i, j) in edges {
                let name = |n: usize| layout.joints.get(n).cloned().unwrap_or_else(|| n.to_string());
                let _ = writeln!(out, "{status},{},{}", name(i), name(j));
            }
        }
        out
    }
}

pub fn diff_graphs(
    learned: &EdgeFrequencyMatrix,
    baseline: &AdjacencyMatrix,
    threshold: f64,
) -> Result<GraphDiff> {
    if learned.size() != baseline.size() {
        return Err(Error::shape(
            "diff_graphs",
            format!("learned has {} joints, baseline {}", learned.size(), baseline.size()),
        ));
    }
    check_threshold(threshold)?;
    let mut diff = GraphDiff::default();
    for (i, j) in candidate_edges(learned.size()) {
        match (learned.get(i, j) >= threshold, baseline.get(i, j) != 0.0) {
            (true, true) => diff.kept.push((i, j)),
            (true, false) => diff.added.push((i, j)),
            (false, true) => diff.removed.push((i, j)),
            (false, false) => {}
        }
    }
    Ok(diff)
}
