//! Finite-difference verification of every block's gradients.
//!
//! Each check builds one block at tiny dimensions in `f64`, contracts its
//! output with a fixed random tensor, and compares the autodiff gradient of
//! that scalar against central differences, with respect to the block input
//! and every learnable parameter. Batch norms run in training mode, so batch
//! statistics are part of the differentiated function.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dstt::{DsttBlock, DsttConfig};
use crate::error::{Error, Result};
use crate::model::{Hgct, ModelConfig};
use crate::nn::{Mode, ParamId, ParamStore, Session};
use crate::skeleton::SkeletonGraph;
use crate::stgc::{MultiscaleTemporalConv, SpatialGraphConv, StgcConfig};
use crate::tensor::gradcheck::{check_selected, GradCheckReport, Probe, DEFAULT_STEP};
use crate::tensor::{Tensor, Var};
use crate::topology::{build_partitions, TopologyMode};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Seeds per block in the full suite.
pub const GRADCHECK_SEEDS: u64 = 10;
/// Coordinates probed per tensor; smaller tensors are probed entirely.
pub const COORDS_PER_TENSOR: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BlockKind {
    SpatialFixed,
    SpatialLearnable,
    SpatialScaled,
    MultiscaleTemporal,
    Disentangle,
    SpatialAttention,
    TemporalAttention,
    Cwff,
    Dstt,
    Model,
}

impl BlockKind {
    pub const ALL: [BlockKind; 10] = [
        BlockKind::SpatialFixed,
        BlockKind::SpatialLearnable,
        BlockKind::SpatialScaled,
        BlockKind::MultiscaleTemporal,
        BlockKind::Disentangle,
        BlockKind::SpatialAttention,
        BlockKind::TemporalAttention,
        BlockKind::Cwff,
        BlockKind::Dstt,
        BlockKind::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::SpatialFixed => "spatial-fixed",
            BlockKind::SpatialLearnable => "spatial-learnable",
            BlockKind::SpatialScaled => "spatial-scaled",
            BlockKind::MultiscaleTemporal => "temporal",
            BlockKind::Disentangle => "disentangle",
            BlockKind::SpatialAttention => "gsa",
            BlockKind::TemporalAttention => "gta",
            BlockKind::Cwff => "cwff",
            BlockKind::Dstt => "dstt",
            BlockKind::Model => "model",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<&str> = BlockKind::ALL.iter().map(|b| b.name()).collect();
            Error::config(format!("unknown block `{s}` (expected all or one of {})", names.join(", ")))
        })
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `all` or a comma-separated list of block names.
pub fn parse_blocks(spec: &str) -> Result<Vec<BlockKind>> {
    if spec == "all" {
        return Ok(BlockKind::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

type Forward = Box<dyn for<'a> Fn(&mut Session<'a, f64>, Var) -> Result<Var>>;

struct Fixture {
    store: ParamStore<f64>,
    input: Tensor<f64>,
    forward: Forward,
}

const BATCH: usize = 2;
const FRAMES: usize = 8;
const JOINTS: usize = 5;
/// Past every freeze window, so adjacency gradients are live.
const EPOCH: usize = 1_000;

fn tiny_dstt() -> DsttConfig {
    DsttConfig {
        c_e: 8,
        alpha: 0.25,
        s_heads: 2,
        t_heads: 2,
        gamma: 2,
        ..DsttConfig::default()
    }
}

fn tiny_graph() -> SkeletonGraph {
    SkeletonGraph::chain(JOINTS, JOINTS / 2).expect("valid chain")
}

fn fixture(kind: BlockKind, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let mut store = ParamStore::new();
    let input = |c: usize, rng: &mut ChaCha8Rng| Tensor::randn([BATCH, c, FRAMES, JOINTS], 1.0, rng);
    let graph = tiny_graph();
    let dstt_block = |store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, c_in: usize| {
        DsttBlock::new(store, rng, "dstt", &tiny_dstt(), c_in, JOINTS, true)
    };
    let fx = match kind {
        BlockKind::SpatialFixed | BlockKind::SpatialLearnable | BlockKind::SpatialScaled => {
            let mode = match kind {
                BlockKind::SpatialFixed => TopologyMode::Fixed,
                BlockKind::SpatialLearnable => TopologyMode::Learnable,
                _ => TopologyMode::Scaled,
            };
            let cfg = StgcConfig::new(3, 4, mode);
            let block = SpatialGraphConv::new(&mut store, rng, "sgc", &cfg, &build_partitions(&graph))?;
            let x = input(3, rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.forward(s, x)),
            }
        }
        BlockKind::MultiscaleTemporal => {
            let block = MultiscaleTemporalConv::new(&mut store, rng, "tcn", 8, [1, 2])?;
            let x = input(8, rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.forward(s, x)),
            }
        }
        BlockKind::Disentangle => {
            let block = dstt_block(&mut store, rng, 4)?;
            let x = input(4, rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| {
                    let (fs, ft) = block.disentangle(s, x)?;
                    let (fs, ft) = block.positional_encode(s, fs, ft)?;
                    s.graph.concat(&[fs, ft], 1)
                }),
            }
        }
        BlockKind::SpatialAttention => {
            let block = dstt_block(&mut store, rng, 4)?;
            let x = input(tiny_dstt().c_s(), rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.spatial_attention(s, x)),
            }
        }
        BlockKind::TemporalAttention => {
            let block = dstt_block(&mut store, rng, 4)?;
            let x = input(tiny_dstt().c_t(), rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.temporal_attention(s, x)),
            }
        }
        BlockKind::Cwff => {
            let block = dstt_block(&mut store, rng, 4)?;
            let x = input(tiny_dstt().c_e, rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.cwff.forward(s, x, 0.0)),
            }
        }
        BlockKind::Dstt => {
            let block = dstt_block(&mut store, rng, 4)?;
            let x = input(4, rng);
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| block.forward(s, x)),
            }
        }
        BlockKind::Model => {
            let cfg = ModelConfig {
                stages: vec![8; 3],
                stgc_blocks: 1,
                dstt: tiny_dstt(),
                num_classes: 3,
                v: JOINTS,
                ..ModelConfig::default()
            };
            let model = Hgct::<f64>::new(cfg, graph, rand::Rng::random(rng))?;
            let x = input(3, rng);
            let Hgct { store, .. } = model.clone();
            Fixture {
                store,
                input: x,
                forward: Box::new(move |s, x| model.forward(s, x)),
            }
        }
    };
    Ok(fx)
}

/// One forward pass with `values[0]` as input and `values[1..]` as the
/// learnable parameters `ids`, contracted with `weights`.
fn probe(fx: &Fixture, ids: &[ParamId], values: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<Probe> {
    let mut store = fx.store.clone();
    for (&id, v) in ids.iter().zip(&values[1..]) {
        *store.value_mut(id) = v.clone();
    }
    let (graph, loss, leaves) = {
        let mut s = Session::new(&store, Mode::Train, EPOCH);
        s.graph.track_kinks(true);
        let x = s.graph.leaf(values[0].clone(), true);
        let mut leaves = vec![x];
        leaves.extend(ids.iter().map(|&id| s.param(id)));
        let out = (fx.forward)(&mut s, x)?;
        let loss = match weights {
            Some(w) => {
                let w = s.graph.constant(w.clone());
                let prod = s.graph.mul(out, w)?;
                s.graph.sum(prod)
            }
            None => out,
        };
        (s.into_graph(), loss, leaves)
    };
    Ok(Probe { graph, loss, leaves })
}

/// Gradient check of one block at one seed.
pub fn check_block(kind: BlockKind, seed: u64) -> Result<GradCheckReport> {
    check_block_h(kind, seed, DEFAULT_STEP)
}

fn check_block_h(kind: BlockKind, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let fx = fixture(kind, &mut rng)?;
    let ids: Vec<ParamId> = fx
        .store
        .ids()
        .filter(|&id| fx.store.entry(id).kind.is_learnable())
        .collect();
    let mut values = vec![fx.input.clone()];
    values.extend(ids.iter().map(|&id| fx.store.value(id).clone()));
    let shape = {
        let p = probe(&fx, &ids, &values, None)?;
        p.graph.value(p.loss).shape().to_vec()
    };
    let weights = Tensor::randn(shape, 1.0, &mut rng);
    // coordinate picks are drawn up front so every rebuild sees the same set
    let picks: Vec<Vec<usize>> = values
        .iter()
        .map(|v| {
            let n = v.numel();
            if n <= COORDS_PER_TENSOR {
                (0..n).collect()
            } else {
                sample(&mut rng, n, COORDS_PER_TENSOR).into_vec()
            }
        })
        .collect();
    check_selected(
        &values,
        |vals| probe(&fx, &ids, vals, Some(&weights)),
        h,
        |leaf, _| picks[leaf].clone(),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: BlockKind,
    pub seeds: u64,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Checks every block in `kinds` over seeds `0..seeds`.
pub fn check_blocks(kinds: &[BlockKind], seeds: u64) -> Result<Vec<BlockCheck>> {
    kinds
        .iter()
        .map(|&block| {
            let mut total = GradCheckReport::default();
            for seed in 0..seeds {
                total.merge(&check_block(block, seed)?);
            }
            if let Some((leaf, coord, a, n)) = total.worst {
                log::debug!("{block}: worst at leaf {leaf} coordinate {coord}: autodiff {a:e}, numeric {n:e}");
            }
            Ok(BlockCheck {
                block,
                seeds,
                max_relative_error: total.max_relative_error,
                coordinates: total.coordinates,
                skipped: total.skipped,
                passed: total.passes(GRADCHECK_TOLERANCE),
            })
        })
        .collect()
}
