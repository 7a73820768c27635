//! Partitioned body-graph adjacencies and their learnability modes.
//!
//! Neighbours of joint `i` are split by hop distance to the body center:
//! the joint itself, neighbours closer to the center (centripetal) and
//! neighbours farther from it (centrifugal). Each partition is row
//! normalised, `A_k ← D_k⁻¹ A_k`, with all-zero rows left at zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore, Session};
use crate::skeleton::SkeletonGraph;
use crate::tensor::{Scalar, Tensor, Var};

/// Number of neighbourhood partitions.
pub const PARTITIONS: usize = 3;

/// Default number of epochs during which learnable adjacencies are frozen.
pub const DEFAULT_FREEZE_EPOCHS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyMode {
    /// The body graph `A_o` as a constant.
    Fixed,
    /// A per-layer learnable copy `Ã` initialised to `A_o`.
    Learnable,
    /// `λ·Ã` with a learnable per-layer scalar `λ` initialised to one.
    #[default]
    Scaled,
}

impl TopologyMode {
    pub const ALL: [TopologyMode; 3] = [TopologyMode::Fixed, TopologyMode::Learnable, TopologyMode::Scaled];

    pub fn name(self) -> &'static str {
        match self {
            TopologyMode::Fixed => "fixed",
            TopologyMode::Learnable => "learnable",
            TopologyMode::Scaled => "scaled",
        }
    }

    /// Learnable scalars one layer of this mode adds over `A_o`.
    pub fn param_count(self, v: usize) -> usize {
        match self {
            TopologyMode::Fixed => 0,
            TopologyMode::Learnable => PARTITIONS * v * v,
            TopologyMode::Scaled => PARTITIONS * v * v + 1,
        }
    }
}

impl FromStr for TopologyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(TopologyMode::Fixed),
            "learnable" => Ok(TopologyMode::Learnable),
            "scaled" | "learnable-scaled" => Ok(TopologyMode::Scaled),
            other => Err(Error::config(format!("unknown topology mode `{other}`"))),
        }
    }
}

impl fmt::Display for TopologyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unnormalised 0/1 partitions. Their sum is `I + adjacency`.
pub fn raw_partitions(graph: &SkeletonGraph) -> [Tensor<f64>; PARTITIONS] {
    let v = graph.joints();
    let mut parts = [Tensor::zeros([v, v]), Tensor::zeros([v, v]), Tensor::zeros([v, v])];
    for i in 0..v {
        parts[0].set(&[i, i], 1.0);
    }
    for &(a, b) in graph.edges() {
        for (i, j) in [(a, b), (b, a)] {
            let k = if graph.depth(j) < graph.depth(i) { 1 } else { 2 };
            parts[k].set(&[i, j], 1.0);
        }
    }
    parts
}

/// Row-normalised partitions (self, centripetal, centrifugal).
pub fn build_partitions(graph: &SkeletonGraph) -> [Tensor<f64>; PARTITIONS] {
    let v = graph.joints();
    raw_partitions(graph).map(|mut a| {
        for row in a.data_mut().chunks_mut(v) {
            let d: f64 = row.iter().sum();
            if d > 0.0 {
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
        a
    })
}

/// One layer's adjacency state: fixed base partitions plus whatever the mode
/// makes learnable.
#[derive(Clone, Debug)]
pub struct PartitionedAdjacency {
    pub base: [ParamId; PARTITIONS],
    pub tilde: Option<[ParamId; PARTITIONS]>,
    pub lambda: Option<ParamId>,
    pub mode: TopologyMode,
    pub freeze_epochs: usize,
    pub v: usize,
}

impl PartitionedAdjacency {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        partitions: &[Tensor<f64>; PARTITIONS],
        mode: TopologyMode,
        freeze_epochs: usize,
    ) -> Result<Self> {
        let v = partitions[0].shape()[0];
        if partitions.iter().any(|p| p.shape() != [v, v]) {
            return Err(Error::Topology("partitions must be square and equally sized".into()));
        }
        let mut reg = |suffix: String, kind: ParamKind, t: &Tensor<f64>| store.register(format!("{name}.{suffix}"), kind, t.cast());
        let base = [
            reg("base.0".into(), ParamKind::Buffer, &partitions[0])?,
            reg("base.1".into(), ParamKind::Buffer, &partitions[1])?,
            reg("base.2".into(), ParamKind::Buffer, &partitions[2])?,
        ];
        let tilde = match mode {
            TopologyMode::Fixed => None,
            _ => Some([
                reg("adj.0".into(), ParamKind::Adjacency, &partitions[0])?,
                reg("adj.1".into(), ParamKind::Adjacency, &partitions[1])?,
                reg("adj.2".into(), ParamKind::Adjacency, &partitions[2])?,
            ]),
        };
        let lambda = match mode {
            TopologyMode::Scaled => Some(reg("lambda".into(), ParamKind::Lambda, &Tensor::ones([1]))?),
            _ => None,
        };
        Ok(PartitionedAdjacency {
            base,
            tilde,
            lambda,
            mode,
            freeze_epochs,
            v,
        })
    }

    /// Whether `Ã` is held constant at `epoch`.
    pub fn frozen_at(&self, epoch: usize) -> bool {
        epoch < self.freeze_epochs
    }

    /// Binds the three matrices used by the forward pass at the session's epoch.
    pub fn effective<F: Scalar>(&self, s: &mut Session<'_, F>) -> Result<[Var; PARTITIONS]> {
        let frozen = self.frozen_at(s.epoch());
        let bind = |s: &mut Session<'_, F>, id: ParamId| if frozen { s.frozen(id) } else { s.param(id) };
        let mats = match (self.mode, self.tilde) {
            (TopologyMode::Fixed, _) | (_, None) => self.base.map(|id| s.frozen(id)),
            (_, Some(t)) => t.map(|id| bind(s, id)),
        };
        match self.lambda {
            Some(l) if self.mode == TopologyMode::Scaled => {
                let l = s.param(l);
                let mut out = mats;
                for m in &mut out {
                    *m = s.graph.mul(*m, l)?;
                }
                Ok(out)
            }
            _ => Ok(mats),
        }
    }

    /// Effective matrices computed directly from the store.
    pub fn effective_values<F: Scalar>(&self, store: &ParamStore<F>) -> [Tensor<F>; PARTITIONS] {
        let mats = match self.tilde {
            Some(t) if self.mode != TopologyMode::Fixed => t.map(|id| store.value(id).clone()),
            _ => self.base.map(|id| store.value(id).clone()),
        };
        match self.lambda {
            Some(l) => {
                let lam = store.value(l).data()[0];
                mats.map(|mut m| {
                    m.data_mut().iter_mut().for_each(|x| *x *= lam);
                    m
                })
            }
            None => mats,
        }
    }
}
