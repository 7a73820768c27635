//! Spatiotemporal graph convolution: a partitioned spatial graph convolution
//! followed by a four-branch multiscale temporal convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Init, ParamStore, Session};
use crate::tensor::{ConvSpec, Scalar, Tensor, Var};
use crate::topology::{PartitionedAdjacency, TopologyMode, PARTITIONS};

/// Kernel length of the two dilated temporal branches.
pub const TEMPORAL_KERNEL: usize = 5;

/// Window of the temporal max-pool branch.
pub const POOL_WINDOW: usize = 3;

/// Number of temporal branches; each gets a quarter of the channels.
pub const BRANCHES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StgcConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub mode: TopologyMode,
    pub freeze_epochs: usize,
    pub dilations: [usize; 2],
}

impl StgcConfig {
    pub fn new(c_in: usize, c_out: usize, mode: TopologyMode) -> Self {
        StgcConfig {
            c_in,
            c_out,
            mode,
            freeze_epochs: crate::topology::DEFAULT_FREEZE_EPOCHS,
            dilations: [1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config("block channels must be positive"));
        }
        if self.c_out % BRANCHES != 0 {
            return Err(Error::config(format!(
                "temporal width {} is not divisible by {BRANCHES} branches",
                self.c_out
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::config("dilation rates must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self, v: usize) -> usize {
        let spatial = PARTITIONS * Conv::param_count(self.c_in, self.c_out, 1, 1, false)
            + BatchNorm::PARAMS_PER_CHANNEL * self.c_out
            + self.mode.param_count(v);
        let residual = if self.c_in == self.c_out {
            0
        } else {
            Conv::param_count(self.c_in, self.c_out, 1, 1, false) + BatchNorm::PARAMS_PER_CHANNEL * self.c_out
        };
        spatial + MultiscaleTemporalConv::param_count(self.c_out) + residual
    }

    /// Multiply-accumulates for one sample over `t × v`.
    pub fn macs(&self, t: usize, v: usize) -> u64 {
        let tv = (t * v) as u64;
        let contraction = (self.c_in * t * v * v) as u64;
        let spatial = PARTITIONS as u64 * (contraction + (self.c_in * self.c_out) as u64 * tv);
        let residual = if self.c_in == self.c_out {
            0
        } else {
            (self.c_in * self.c_out) as u64 * tv
        };
        spatial + MultiscaleTemporalConv::macs(self.c_out, t, v) + residual
    }
}

/// `Σ_k Conv1×1_k(f · A_k)` then batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct SpatialGraphConv {
    pub adjacency: PartitionedAdjacency,
    pub convs: [Conv; PARTITIONS],
    pub bn: BatchNorm,
}

impl SpatialGraphConv {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &StgcConfig,
        partitions: &[Tensor<f64>; PARTITIONS],
    ) -> Result<Self> {
        let adjacency = PartitionedAdjacency::new(store, &format!("{name}.graph"), partitions, cfg.mode, cfg.freeze_epochs)?;
        let mut conv = |k: usize| {
            Conv::new(store, rng, &format!("{name}.conv{k}"), cfg.c_in, cfg.c_out, 1, ConvSpec::default(), false, Init::KaimingNormal)
        };
        let convs = [conv(0)?, conv(1)?, conv(2)?];
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cfg.c_out)?;
        Ok(SpatialGraphConv { adjacency, convs, bn })
    }

    /// The graph convolution before normalisation and activation.
    pub fn aggregate<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.adjacency.v {
            return Err(Error::dim(format!(
                "graph conv over {} joints got input {shape:?}",
                self.adjacency.v
            )));
        }
        let mats = self.adjacency.effective(s)?;
        let mut acc: Option<Var> = None;
        for (conv, a) in self.convs.iter().zip(mats) {
            let mixed = s.graph.matmul(x, a)?;
            let y = conv.forward(s, mixed)?;
            acc = Some(match acc {
                Some(prev) => s.graph.add(prev, y)?,
                None => y,
            });
        }
        Ok(acc.expect("three partitions"))
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let y = self.aggregate(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Clone, Debug)]
struct DilatedBranch {
    reduce: Conv,
    reduce_bn: BatchNorm,
    conv: Conv,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct PoolBranch {
    reduce: Conv,
    reduce_bn: BatchNorm,
    bn: BatchNorm,
}

/// Two dilated `5×1` branches, a `3×1` max-pool branch and a `1×1` branch,
/// each of width `C/4`, concatenated, added to the input and rectified.
#[derive(Clone, Debug)]
pub struct MultiscaleTemporalConv {
    dilated: [DilatedBranch; 2],
    pool: PoolBranch,
    point: Conv,
    point_bn: BatchNorm,
    pub channels: usize,
}

impl MultiscaleTemporalConv {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        dilations: [usize; 2],
    ) -> Result<Self> {
        if channels == 0 || channels % BRANCHES != 0 {
            return Err(Error::config(format!(
                "temporal width {channels} is not divisible by {BRANCHES} branches"
            )));
        }
        let q = channels / BRANCHES;
        let one = ConvSpec::default();
        let reduce = |store: &mut ParamStore<F>, rng: &mut _, n: &str| {
            Conv::new(store, rng, n, channels, q, 1, one, false, Init::KaimingNormal)
        };
        let mut dilated = Vec::with_capacity(2);
        for (i, &d) in dilations.iter().enumerate() {
            let b = format!("{name}.branch{i}");
            dilated.push(DilatedBranch {
                reduce: reduce(store, rng, &format!("{b}.reduce"))?,
                reduce_bn: BatchNorm::new(store, &format!("{b}.reduce_bn"), q)?,
                conv: Conv::new(
                    store,
                    rng,
                    &format!("{b}.conv"),
                    q,
                    q,
                    TEMPORAL_KERNEL,
                    ConvSpec::same(TEMPORAL_KERNEL, d),
                    false,
                    Init::KaimingNormal,
                )?,
                bn: BatchNorm::new(store, &format!("{b}.bn"), q)?,
            });
        }
        let pool = PoolBranch {
            reduce: reduce(store, rng, &format!("{name}.branch2.reduce"))?,
            reduce_bn: BatchNorm::new(store, &format!("{name}.branch2.reduce_bn"), q)?,
            bn: BatchNorm::new(store, &format!("{name}.branch2.bn"), q)?,
        };
        let point = reduce(store, rng, &format!("{name}.branch3.conv"))?;
        let point_bn = BatchNorm::new(store, &format!("{name}.branch3.bn"), q)?;
        let dilated: [DilatedBranch; 2] = dilated.try_into().expect("two dilations");
        Ok(MultiscaleTemporalConv {
            dilated,
            pool,
            point,
            point_bn,
            channels,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        let q = channels / BRANCHES;
        let reduce = Conv::param_count(channels, q, 1, 1, false);
        let bn = BatchNorm::PARAMS_PER_CHANNEL * q;
        let dilated = reduce + bn + Conv::param_count(q, q, TEMPORAL_KERNEL, 1, false) + bn;
        2 * dilated + (reduce + 2 * bn) + (reduce + bn)
    }

    pub fn macs(channels: usize, t: usize, v: usize) -> u64 {
        let q = channels / BRANCHES;
        let tv = (t * v) as u64;
        let reduce = (channels * q) as u64 * tv;
        let temporal = (q * q * TEMPORAL_KERNEL) as u64 * tv;
        2 * (reduce + temporal) + reduce + reduce
    }

    /// The four branch outputs before concatenation, in order.
    pub fn branches<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<[Var; BRANCHES]> {
        let c = s.graph.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::dim(format!("temporal conv of width {} got {c} channels", self.channels)));
        }
        let mut out = Vec::with_capacity(BRANCHES);
        for b in &self.dilated {
            let y = b.reduce.forward(s, x)?;
            let y = b.reduce_bn.forward(s, y)?;
            let y = s.graph.relu(y);
            let y = b.conv.forward(s, y)?;
            out.push(b.bn.forward(s, y)?);
        }
        let y = self.pool.reduce.forward(s, x)?;
        let y = self.pool.reduce_bn.forward(s, y)?;
        let y = s.graph.relu(y);
        let y = s.graph.max_pool_t(y, POOL_WINDOW)?;
        out.push(self.pool.bn.forward(s, y)?);
        let y = self.point.forward(s, x)?;
        out.push(self.point_bn.forward(s, y)?);
        Ok(out.try_into().expect("four branches"))
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let parts = self.branches(s, x)?;
        let cat = s.graph.concat(&parts, 1)?;
        let y = s.graph.add(cat, x)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Clone, Debug)]
enum Residual {
    Identity,
    Project { conv: Conv, bn: BatchNorm },
}

/// `ReLU(temporal(spatial(f)) + residual(f))`.
#[derive(Clone, Debug)]
pub struct StgcBlock {
    pub spatial: SpatialGraphConv,
    pub temporal: MultiscaleTemporalConv,
    residual: Residual,
    pub config: StgcConfig,
}

impl StgcBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &StgcConfig,
        partitions: &[Tensor<f64>; PARTITIONS],
    ) -> Result<Self> {
        cfg.validate()?;
        let spatial = SpatialGraphConv::new(store, rng, &format!("{name}.spatial"), cfg, partitions)?;
        let temporal = MultiscaleTemporalConv::new(store, rng, &format!("{name}.temporal"), cfg.c_out, cfg.dilations)?;
        let residual = if cfg.c_in == cfg.c_out {
            Residual::Identity
        } else {
            Residual::Project {
                conv: Conv::new(
                    store,
                    rng,
                    &format!("{name}.residual.conv"),
                    cfg.c_in,
                    cfg.c_out,
                    1,
                    ConvSpec::default(),
                    false,
                    Init::KaimingNormal,
                )?,
                bn: BatchNorm::new(store, &format!("{name}.residual.bn"), cfg.c_out)?,
            }
        };
        Ok(StgcBlock {
            spatial,
            temporal,
            residual,
            config: cfg.clone(),
        })
    }

    /// The residual projection's conv weight, when channels change.
    pub fn residual_weight(&self) -> Option<crate::nn::ParamId> {
        match &self.residual {
            Residual::Identity => None,
            Residual::Project { conv, .. } => Some(conv.weight),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let y = self.spatial.forward(s, x)?;
        let y = self.temporal.forward(s, y)?;
        let r = match &self.residual {
            Residual::Identity => x,
            Residual::Project { conv, bn } => {
                let r = conv.forward(s, x)?;
                bn.forward(s, r)?
            }
        };
        let y = s.graph.add(y, r)?;
        Ok(s.graph.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::skeleton::SkeletonGraph;
    use crate::topology::build_partitions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c_in: usize, c_out: usize, v: usize) -> (ParamStore<f64>, StgcBlock) {
        let g = SkeletonGraph::chain(v, 0).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = StgcConfig::new(c_in, c_out, TopologyMode::Scaled);
        let b = StgcBlock::new(&mut store, &mut rng, "b", &cfg, &build_partitions(&g)).unwrap();
        (store, b)
    }

    #[test]
    fn swapped_pair_adjacency_swaps_joints() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let swap = Tensor::from_f64([2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let zero = Tensor::zeros([2, 2]);
        let cfg = StgcConfig::new(1, 1, TopologyMode::Fixed);
        let sp = SpatialGraphConv::new(&mut store, &mut rng, "s", &cfg, &[swap, zero.clone(), zero]).unwrap();
        for c in &sp.convs {
            store.value_mut(c.weight).data_mut()[0] = 1.0;
        }
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.input(Tensor::from_f64([1, 1, 1, 2], &[1.0, 2.0]).unwrap());
        let y = sp.aggregate(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).data(), &[2.0, 1.0]);
    }

    #[test]
    fn zero_lambda_annihilates_the_aggregation() {
        let (mut store, b) = block(2, 4, 3);
        store.value_mut(b.spatial.adjacency.lambda.unwrap()).data_mut()[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::new(&store, Mode::Train, 0);
        let x = s.input(Tensor::randn([2, 2, 5, 3], 1.0, &mut rng));
        let y = b.spatial.aggregate(&mut s, x).unwrap();
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_follows_config() {
        let (store, b) = block(3, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Session::new(&store, Mode::Train, 0);
        let x = s.input(Tensor::randn([2, 3, 6, 4], 1.0, &mut rng));
        let y = b.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 8, 6, 4]);
    }

    #[test]
    fn indivisible_width_is_a_config_error() {
        let cfg = StgcConfig::new(3, 6, TopologyMode::Fixed);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for (c_in, c_out, mode) in [(3, 8, TopologyMode::Scaled), (8, 8, TopologyMode::Fixed), (4, 12, TopologyMode::Learnable)] {
            let g = SkeletonGraph::chain(5, 2).unwrap();
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cfg = StgcConfig::new(c_in, c_out, mode);
            StgcBlock::new(&mut store, &mut rng, "b", &cfg, &build_partitions(&g)).unwrap();
            assert_eq!(store.learnable_count(), cfg.param_count(5));
        }
    }

    #[test]
    fn analytic_macs_match_the_graph_counter() {
        let (store, b) = block(3, 8, 4);
        let mut s = Session::new(&store, Mode::Train, 0);
        let x = s.input(Tensor::ones([1, 3, 6, 4]));
        b.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.macs(), b.config.macs(6, 4));
    }
}
