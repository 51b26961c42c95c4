//! Joint layouts, the anatomy baseline graph, and symmetric GCN normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `V x V` nonnegative matrix. Raw edge masks keep a zero diagonal;
/// self-loops appear only after [`normalize_adjacency`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn zeros(size: usize) -> Self {
        AdjacencyMatrix {
            size,
            entries: vec![0.0; size * size],
        }
    }

    pub fn from_entries(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::shape(
                "adjacency",
                format!("{} entries for a {size}x{size} matrix", entries.len()),
            ));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain {
                op: "adjacency",
                detail: "entries must be finite and nonnegative".into(),
            });
        }
        Ok(AdjacencyMatrix { size, entries })
    }

    /// Complete graph on `size` nodes, zero diagonal.
    pub fn complete(size: usize) -> Self {
        let mut a = Self::zeros(size);
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    a.entries[i * size + j] = 1.0;
                }
            }
        }
        a
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    /// Sets `A[i][j]` and `A[j][i]`.
    pub fn set_symmetric(&mut self, i: usize, j: usize, value: f64) {
        self.entries[i * self.size + j] = value;
        self.entries[j * self.size + i] = value;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Number of undirected edges with a nonzero entry above the diagonal.
    pub fn edge_count(&self) -> usize {
        candidate_edges(self.size)
            .filter(|&(i, j)| self.get(i, j) != 0.0)
            .count()
    }

    pub fn nonzero_count(&self) -> usize {
        self.entries.iter().filter(|v| **v != 0.0).count()
    }
}

/// Candidate undirected edges `(i, j)` with `i < j`, in row-major order.
/// Edge `e` of this sequence is the `e`-th logit pair emitted upstream.
pub fn candidate_edges(v: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..v).flat_map(move |i| (i + 1..v).map(move |j| (i, j)))
}

pub fn edge_count_for(v: usize) -> usize {
    v * v.saturating_sub(1) / 2
}

/// Named joints plus an undirected bone list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLayout {
    pub name: String,
    pub joints: Vec<String>,
    pub bones: Vec<(usize, usize)>,
    /// (left, right) hip joints; their midpoint is the root used for
    /// sequence normalization.
    #[serde(default)]
    pub hips: Option<(usize, usize)>,
    /// (left, right) shoulder joints; torso length is hip-mid to shoulder-mid.
    #[serde(default)]
    pub shoulders: Option<(usize, usize)>,
}

pub const COCO17_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// The 16 bones of the default layout: a spanning tree over the 17 COCO
/// keypoints (face, neck, arms, torso sides, legs).
pub const COCO17_BONES: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

impl JointLayout {
    pub fn coco17() -> Self {
        JointLayout {
            name: "coco17".into(),
            joints: COCO17_JOINTS.iter().map(|s| s.to_string()).collect(),
            bones: COCO17_BONES.to_vec(),
            hips: Some((11, 12)),
            shoulders: Some((5, 6)),
        }
    }

    /// Layout with generic joint names `j0..j{v-1}` and no bones.
    pub fn unnamed(v: usize) -> Self {
        JointLayout {
            name: format!("generic{v}"),
            joints: (0..v).map(|i| format!("j{i}")).collect(),
            bones: vec![],
            hips: None,
            shoulders: None,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.joints.len();
        let mut seen = std::collections::BTreeSet::new();
        for (n, &(a, b)) in self.bones.iter().enumerate() {
            if a >= v || b >= v {
                return Err(Error::config(
                    format!("layout.bones[{n}]"),
                    format!("endpoint out of range for {v} joints"),
                ));
            }
            if a == b {
                return Err(Error::config(format!("layout.bones[{n}]"), "self-pair bone"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::config(format!("layout.bones[{n}]"), "duplicate bone"));
            }
        }
        for (field, pair) in [("hips", self.hips), ("shoulders", self.shoulders)] {
            if let Some((a, b)) = pair {
                if a >= v || b >= v {
                    return Err(Error::config(
                        format!("layout.{field}"),
                        format!("joint out of range for {v} joints"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layout: JointLayout = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            field: "layout".into(),
            detail: e.to_string(),
        })?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("layout serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `A[i][j] = A[j][i] = 1` for every bone.
pub fn build_anatomy_graph(layout: &JointLayout) -> Result<AdjacencyMatrix> {
    layout.validate()?;
    let mut a = AdjacencyMatrix::zeros(layout.num_joints());
    for &(i, j) in &layout.bones {
        a.set_symmetric(i, j, 1.0);
    }
    Ok(a)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `d_i = sum_j (A + I)[i][j]`.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> AdjacencyMatrix {
    let v = a.size;
    let mut with_loops = a.entries.clone();
    for i in 0..v {
        with_loops[i * v + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| 1.0 / with_loops[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
        .collect();
    let entries = (0..v * v)
        .map(|n| with_loops[n] * (inv_sqrt[n / v] * inv_sqrt[n % v]))
        .collect();
    AdjacencyMatrix { size: v, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_joint_layout_is_zero() {
        let layout = JointLayout::unnamed(1);
        let a = build_anatomy_graph(&layout).unwrap();
        assert_eq!(a.entries(), &[0.0]);
    }

    #[test]
    fn coco17_has_32_nonzeros() {
        let a = build_anatomy_graph(&JointLayout::coco17()).unwrap();
        assert_eq!(a.nonzero_count(), 2 * COCO17_BONES.len());
        assert_eq!(a.nonzero_count(), 32);
        assert!(a.is_symmetric());
        assert!((0..17).all(|i| a.get(i, i) == 0.0));
    }

    #[test]
    fn coco17_bones_form_a_spanning_tree() {
        // union-find over the bone table: 16 merges, one component
        let mut parent: Vec<usize> = (0..17).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for &(a, b) in &COCO17_BONES {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            assert_ne!(ra, rb, "bone ({a}, {b}) closes a cycle");
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        assert!((0..17).all(|j| find(&mut parent, j) == root));
    }

    #[test]
    fn layout_validation() {
        let mut l = JointLayout::unnamed(3);
        l.bones = vec![(0, 3)];
        assert!(matches!(l.validate(), Err(Error::Config { .. })));
        l.bones = vec![(1, 1)];
        assert!(l.validate().is_err());
        l.bones = vec![(0, 1), (1, 0)];
        assert!(l.validate().is_err());
        l.bones = vec![(0, 1), (1, 2)];
        assert!(l.validate().is_ok());
    }

    #[test]
    fn layout_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coco17.json");
        JointLayout::coco17().save(&path).unwrap();
        assert_eq!(JointLayout::load(&path).unwrap(), JointLayout::coco17());
    }

    #[test]
    fn normalize_small_cases() {
        assert_eq!(normalize_adjacency(&AdjacencyMatrix::zeros(1)).entries(), &[1.0]);
        let mut a = AdjacencyMatrix::zeros(2);
        a.set_symmetric(0, 1, 1.0);
        let n = normalize_adjacency(&a);
        for v in n.entries() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_anatomy_has_positive_diagonal() {
        let n = normalize_adjacency(&build_anatomy_graph(&JointLayout::coco17()).unwrap());
        assert!((0..17).all(|i| n.get(i, i) > 0.0));
    }

    #[test]
    fn candidate_edge_order() {
        let e: Vec<_> = candidate_edges(4).collect();
        assert_eq!(e, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(candidate_edges(17).count(), 136);
        assert_eq!(edge_count_for(17), 136);
    }

    fn symmetric_matrix() -> impl Strategy<Value = AdjacencyMatrix> {
        (1usize..8).prop_flat_map(|v| {
            proptest::collection::vec(0.0f64..3.0, edge_count_for(v)).prop_map(move |w| {
                let mut a = AdjacencyMatrix::zeros(v);
                for ((i, j), x) in candidate_edges(v).zip(w) {
                    a.set_symmetric(i, j, x);
                }
                a
            })
        })
    }

    proptest! {
        #[test]
        fn normalized_is_symmetric_in_unit_interval(a in symmetric_matrix()) {
            let n = normalize_adjacency(&a);
            for i in 0..a.size() {
                prop_assert!(n.get(i, i) > 0.0);
                for j in 0..a.size() {
                    prop_assert!((n.get(i, j) - n.get(j, i)).abs() < 1e-15);
                    prop_assert!((0.0..=1.0).contains(&n.get(i, j)));
                }
            }
        }
    }
}
