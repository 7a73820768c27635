//! Skeleton sequences, body graphs and labelled dataset splits.

mod io;
mod synth;
mod transform;

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_jsonl, parse_ntu_skeleton, write_jsonl, DataManifest, MANIFEST_FILE};
pub use synth::{synth_dataset, SynthSpec, SYNTH_CLASSES};
pub use transform::{center, resample, resample_indices, to_bone, to_motion};

/// One labelled sample with coordinates laid out `[C, T, V, M]`.
///
/// Absent bodies (or frames where a body is not tracked) are all-zero slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Tensor<f64>,
    pub label: usize,
}

impl SkeletonSequence {
    pub fn new(coords: Tensor<f64>, label: usize) -> Result<Self> {
        let shape = coords.shape();
        if shape.len() != 4 {
            return Err(Error::Schema(format!(
                "coordinates must be [C, T, V, M], got {shape:?}"
            )));
        }
        if !(2..=3).contains(&shape[0]) {
            return Err(Error::Schema(format!("{} coordinate channels, expected 2 or 3", shape[0])));
        }
        if shape[1] == 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Schema(format!("empty extent in {shape:?}")));
        }
        if !coords.is_finite() {
            return Err(Error::Schema("coordinates contain NaN or infinity".into()));
        }
        Ok(SkeletonSequence { coords, label })
    }

    pub fn coords(&self) -> &Tensor<f64> {
        &self.coords
    }

    pub fn channels(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.coords.shape()[3]
    }

    pub fn at(&self, c: usize, t: usize, v: usize, m: usize) -> f64 {
        self.coords.at(&[c, t, v, m])
    }

    /// Whether body `m` has any nonzero coordinate at frame `t`.
    pub fn body_present(&self, t: usize, m: usize) -> bool {
        (0..self.channels()).any(|c| (0..self.joints()).any(|v| self.at(c, t, v, m) != 0.0))
    }

    /// Whether body `m` has any nonzero coordinate in any frame.
    pub fn body_nonzero(&self, m: usize) -> bool {
        (0..self.frames()).any(|t| self.body_present(t, m))
    }

    pub(crate) fn with_coords(&self, coords: Tensor<f64>) -> Self {
        SkeletonSequence {
            coords,
            label: self.label,
        }
    }
}

/// Intra-body joint connectivity: a tree rooted at `center`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonGraph {
    v: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    #[serde(rename = "V")]
    v: usize,
    edges: Vec<[usize; 2]>,
    center: usize,
}

/// NTU RGB+D 25-joint edges, zero-based.
const NTU25_EDGES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (2, 20),
    (3, 2),
    (4, 20),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 20),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 0),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 0),
    (17, 16),
    (18, 17),
    (19, 18),
    (21, 22),
    (22, 7),
    (23, 24),
    (24, 11),
];

/// Spine-shoulder joint, the conventional NTU body center.
pub const NTU25_CENTER: usize = 20;

impl SkeletonGraph {
    /// Validates that `edges` form a spanning tree over `v` joints and derives
    /// parent links and hop depths from `center`.
    pub fn new(v: usize, edges: Vec<(usize, usize)>, center: usize) -> Result<Self> {
        if v == 0 {
            return Err(Error::Topology("graph has no joints".into()));
        }
        if center >= v {
            return Err(Error::Topology(format!("center {center} out of range for {v} joints")));
        }
        let mut adj = vec![Vec::new(); v];
        for &(i, j) in &edges {
            if i >= v || j >= v {
                return Err(Error::Topology(format!("edge ({i}, {j}) out of range for {v} joints")));
            }
            if i == j {
                return Err(Error::Topology(format!("self-loop at joint {i}")));
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut parent = vec![None; v];
        let mut depth = vec![usize::MAX; v];
        depth[center] = 0;
        let mut queue = VecDeque::from([center]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if depth[w] == usize::MAX {
                    depth[w] = depth[u] + 1;
                    parent[w] = Some(u);
                    queue.push_back(w);
                }
            }
        }
        if let Some(j) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Topology(format!("joint {j} is not connected to center {center}")));
        }
        if edges.len() != v - 1 {
            return Err(Error::Topology(format!(
                "{} edges over {v} joints do not form a tree",
                edges.len()
            )));
        }
        Ok(SkeletonGraph {
            v,
            edges,
            center,
            parent,
            depth,
        })
    }

    pub fn ntu25() -> Self {
        Self::new(25, NTU25_EDGES.to_vec(), NTU25_CENTER).expect("built-in graph is a tree")
    }

    /// Path graph `0 – 1 – … – (n-1)`.
    pub fn chain(n: usize, center: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)).collect(), center)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        Self::new(file.v, file.edges.iter().map(|e| (e[0], e[1])).collect(), file.center)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphFile {
            v: self.v,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            center: self.center,
        })
        .expect("graph serialises")
    }

    pub fn joints(&self) -> usize {
        self.v
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    /// Hop distance from the center.
    pub fn depth(&self, j: usize) -> usize {
        self.depth[j]
    }

    /// Joints of the subtree hanging below `root`, including `root`.
    pub fn subtree(&self, root: usize) -> Vec<usize> {
        (0..self.v)
            .filter(|&j| {
                let mut cur = Some(j);
                while let Some(c) = cur {
                    if c == root {
                        return true;
                    }
                    cur = self.parent[c];
                }
                false
            })
            .collect()
    }

    /// Relabels joints so that old joint `perm[i]` becomes new joint `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.v {
            return Err(Error::dim(format!("permutation of length {} for {} joints", perm.len(), self.v)));
        }
        let mut inv = vec![usize::MAX; self.v];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.v || inv[old] != usize::MAX {
                return Err(Error::dim("not a permutation".to_string()));
            }
            inv[old] = new;
        }
        Self::new(
            self.v,
            self.edges.iter().map(|&(i, j)| (inv[i], inv[j])).collect(),
            inv[self.center],
        )
    }
}

/// Labelled collection of samples sharing joint and channel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub class_count: usize,
    samples: Vec<SkeletonSequence>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, class_count: usize, samples: Vec<SkeletonSequence>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let (v, c) = (first.joints(), first.channels());
            for (i, s) in samples.iter().enumerate() {
                if s.joints() != v || s.channels() != c {
                    return Err(Error::Schema(format!(
                        "sample {i} has V={} C={}, expected V={v} C={c}",
                        s.joints(),
                        s.channels()
                    )));
                }
                if s.label >= class_count {
                    return Err(Error::Schema(format!(
                        "sample {i} has label {} but only {class_count} classes",
                        s.label
                    )));
                }
            }
        }
        Ok(DatasetSplit {
            name: name.into(),
            class_count,
            samples,
        })
    }

    pub fn samples(&self) -> &[SkeletonSequence] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Applies `f` to every sample, keeping name and class count.
    pub fn map(&self, f: impl Fn(&SkeletonSequence) -> Result<SkeletonSequence>) -> Result<Self> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        DatasetSplit::new(self.name.clone(), self.class_count, samples)
    }
}

/// Input stream derived from raw joint coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joint, Modality::Bone, Modality::JointMotion, Modality::BoneMotion];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint-motion",
            Modality::BoneMotion => "bone-motion",
        }
    }

    pub fn apply(self, seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<SkeletonSequence> {
        match self {
            Modality::Joint => Ok(seq.clone()),
            Modality::Bone => to_bone(seq, graph),
            Modality::JointMotion => Ok(to_motion(seq)),
            Modality::BoneMotion => Ok(to_motion(&to_bone(seq, graph)?)),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown modality `{s}`")))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntu_graph_is_a_tree_rooted_at_spine_shoulder() {
        let g = SkeletonGraph::ntu25();
        assert_eq!(g.joints(), 25);
        assert_eq!(g.parent(NTU25_CENTER), None);
        for j in 0..25 {
            let mut cur = j;
            let mut hops = 0;
            while let Some(p) = g.parent(cur) {
                cur = p;
                hops += 1;
            }
            assert_eq!(cur, NTU25_CENTER);
            assert_eq!(hops, g.depth(j));
        }
        // left arm below the elbow: elbow, wrist, hand, hand tip, thumb
        assert_eq!(g.subtree(5), vec![5, 6, 7, 21, 22]);
    }

    #[test]
    fn disconnected_or_cyclic_graphs_are_rejected() {
        assert!(matches!(SkeletonGraph::new(3, vec![(0, 1)], 0), Err(Error::Topology(_))));
        assert!(matches!(
            SkeletonGraph::new(3, vec![(0, 1), (1, 2), (2, 0)], 0),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn graph_json_round_trips() {
        let g = SkeletonGraph::ntu25();
        assert_eq!(SkeletonGraph::from_json_str(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn sequences_reject_non_finite_and_bad_channels() {
        let mut t = Tensor::zeros([3, 2, 4, 1]);
        t.data_mut()[0] = f64::NAN;
        assert!(SkeletonSequence::new(t, 0).is_err());
        assert!(SkeletonSequence::new(Tensor::zeros([4, 2, 4, 1]), 0).is_err());
    }

    #[test]
    fn modality_names_parse() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("depth".parse::<Modality>().is_err());
    }
}
