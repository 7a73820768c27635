//! The three-stage network, its batch layout and analytic cost counters.

mod checkpoint;
mod features;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dstt::{DsttBlock, DsttConfig, DsttTrace};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Init, Linear, Mode, ParamStore, Session};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};
use crate::stgc::{StgcBlock, StgcConfig, BRANCHES};
use crate::tensor::{Scalar, Tensor, Var};
use crate::topology::{build_partitions, TopologyMode, DEFAULT_FREEZE_EPOCHS};

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use features::{dump_feature_responses, feature_responses, FeatureKind, FeatureRecord};

/// Number of stages in the hierarchy.
pub const STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output width of each stage's graph-conv blocks.
    pub stages: Vec<usize>,
    /// Graph-conv blocks per stage, each followed by the stage's transformer block.
    pub stgc_blocks: usize,
    pub dstt: DsttConfig,
    pub topology: TopologyMode,
    pub freeze_epochs: usize,
    pub dilations: [usize; 2],
    pub num_classes: usize,
    pub v: usize,
    pub c_in: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: vec![128; STAGES],
            stgc_blocks: 2,
            dstt: DsttConfig::default(),
            topology: TopologyMode::Scaled,
            freeze_epochs: DEFAULT_FREEZE_EPOCHS,
            dilations: [1, 2],
            num_classes: 120,
            v: 25,
            c_in: 3,
            head_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::config(format!("{} stages configured, the network has {STAGES}", self.stages.len())));
        }
        self.dstt.validate()?;
        for (i, &w) in self.stages.iter().enumerate() {
            if w != self.dstt.c_e {
                return Err(Error::config(format!(
                    "stage {i} width {w} must equal C_e = {} for the stage residual",
                    self.dstt.c_e
                )));
            }
            if w % BRANCHES != 0 {
                return Err(Error::config(format!("stage {i} width {w} is not divisible by {BRANCHES}")));
            }
        }
        if self.stgc_blocks == 0 {
            return Err(Error::config("each stage needs at least one graph-conv block"));
        }
        if self.num_classes == 0 || self.v == 0 {
            return Err(Error::config("num_classes and V must be positive"));
        }
        if !(2..=3).contains(&self.c_in) {
            return Err(Error::config(format!("C_in = {} must be 2 or 3", self.c_in)));
        }
        if self.dilations.contains(&0) {
            return Err(Error::config("dilation rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config(format!("head_dropout {} must lie in [0, 1)", self.head_dropout)));
        }
        Ok(())
    }

    fn stgc_configs(&self, stage: usize) -> Vec<StgcConfig> {
        let c_in = if stage == 0 { self.c_in } else { self.stages[stage - 1] };
        (0..self.stgc_blocks)
            .map(|j| StgcConfig {
                c_in: if j == 0 { c_in } else { self.stages[stage] },
                c_out: self.stages[stage],
                mode: self.topology,
                freeze_epochs: self.freeze_epochs,
                dilations: self.dilations,
            })
            .collect()
    }

    /// Per-block parameter and MAC breakdown for one sample of `t × v` frames.
    pub fn costs(&self, t: usize, v: usize) -> Result<CostReport> {
        self.validate()?;
        let mut blocks = vec![BlockCost {
            name: "input_bn".into(),
            params: BatchNorm::PARAMS_PER_CHANNEL * self.c_in * self.v,
            macs: 0,
        }];
        for i in 0..STAGES {
            for (j, cfg) in self.stgc_configs(i).iter().enumerate() {
                blocks.push(BlockCost {
                    name: format!("stage{i}.stgc{j}"),
                    params: cfg.param_count(self.v),
                    macs: cfg.macs(t, v),
                });
            }
            blocks.push(BlockCost {
                name: format!("stage{i}.dstt"),
                params: self.dstt.param_count(self.stages[i], self.v, i == 0),
                macs: self.dstt.macs(self.stages[i], t, v),
            });
        }
        let width = self.stages[STAGES - 1];
        blocks.push(BlockCost {
            name: "head".into(),
            params: Linear::param_count(width, self.num_classes, true),
            macs: (width * self.num_classes) as u64,
        });
        let macs = blocks.iter().map(|b| b.macs).sum();
        let params = blocks.iter().map(|b| b.params).sum();
        Ok(CostReport {
            blocks,
            params,
            macs,
            flops_2x: 2 * macs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

/// Analytic costs. Normalisation, activations, softmax and pooling are not
/// counted; `flops_2x` counts a multiply-accumulate as two operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub blocks: Vec<BlockCost>,
    pub params: usize,
    pub macs: u64,
    pub flops_2x: u64,
}

/// Exact number of learnable scalars of a model built from `config`.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(config.costs(1, config.v)?.params)
}

/// Multiply-accumulates of one forward pass over a `t × v` sample.
pub fn count_flops(config: &ModelConfig, t: usize, v: usize) -> Result<CostReport> {
    config.costs(t, v)
}

/// Network rows and the matrix averaging them back into samples.
///
/// Every present body of every sample is its own row of `x`. `pool[b, r]` is
/// `1/n_b` for the `n_b` rows of sample `b`; it is `None` when each sample
/// contributes exactly one row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub x: Tensor<F>,
    pub pool: Option<Tensor<F>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Batch<F> {
    pub fn from_sequences(seqs: &[&SkeletonSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::dim("empty batch"))?;
        let (c, t, v) = (first.channels(), first.frames(), first.joints());
        let mut rows: Vec<(usize, usize)> = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            if (s.channels(), s.frames(), s.joints()) != (c, t, v) {
                return Err(Error::dim(format!(
                    "batch mixes sample shapes [{c}, {t}, {v}] and [{}, {}, {}]",
                    s.channels(),
                    s.frames(),
                    s.joints()
                )));
            }
            let present: Vec<usize> = (0..s.bodies()).filter(|&m| s.body_nonzero(m)).collect();
            if present.is_empty() {
                rows.push((b, 0));
            } else {
                rows.extend(present.into_iter().map(|m| (b, m)));
            }
        }
        let plane = t * v;
        let mut data = Vec::with_capacity(rows.len() * c * plane);
        for &(b, m) in &rows {
            let s = seqs[b];
            for ci in 0..c {
                for ti in 0..t {
                    for vi in 0..v {
                        data.push(F::of(s.at(ci, ti, vi, m)));
                    }
                }
            }
        }
        let x = Tensor::new([rows.len(), c, t, v], data)?;
        let pool = (rows.len() != seqs.len()).then(|| {
            let mut counts = vec![0usize; seqs.len()];
            rows.iter().for_each(|&(b, _)| counts[b] += 1);
            let mut p = Tensor::zeros([seqs.len(), rows.len()]);
            for (r, &(b, _)) in rows.iter().enumerate() {
                p.set(&[b, r], F::of(1.0 / counts[b] as f64));
            }
            p
        });
        Ok(Batch {
            x,
            pool,
            labels: seqs.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub stgc: Vec<StgcBlock>,
    pub dstt: DsttBlock,
}

#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stgc: Vec<Var>,
    pub dstt: DsttTrace,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub stages: Vec<StageTrace>,
}

/// The assembled network together with its parameter store.
#[derive(Clone, Debug)]
pub struct Hgct<F: Scalar> {
    pub config: ModelConfig,
    pub graph: SkeletonGraph,
    pub store: ParamStore<F>,
    pub seed: u64,
    input_bn: BatchNorm,
    stages: Vec<Stage>,
    head: Linear,
}

impl<F: Scalar> Hgct<F> {
    pub fn new(config: ModelConfig, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.joints() != config.v {
            return Err(Error::config(format!(
                "config has V = {} but the body graph has {} joints",
                config.v,
                graph.joints()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let partitions = build_partitions(&graph);
        let input_bn = BatchNorm::new(&mut store, "input_bn", config.c_in * config.v)?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let stgc = config
                .stgc_configs(i)
                .iter()
                .enumerate()
                .map(|(j, cfg)| StgcBlock::new(&mut store, &mut rng, &format!("stage{i}.stgc{j}"), cfg, &partitions))
                .collect::<Result<Vec<_>>>()?;
            let dstt = DsttBlock::new(
                &mut store,
                &mut rng,
                &format!("stage{i}.dstt"),
                &config.dstt,
                config.stages[i],
                config.v,
                i == 0,
            )?;
            stages.push(Stage { stgc, dstt });
        }
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head",
            config.stages[STAGES - 1],
            config.num_classes,
            true,
            Init::XavierUniform,
        )?;
        Ok(Hgct {
            config,
            graph,
            store,
            seed,
            input_bn,
            stages,
            head,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn param_count(&self) -> usize {
        self.store.learnable_count()
    }

    pub fn session(&self, mode: Mode, epoch: usize) -> Session<'_, F> {
        Session::new(&self.store, mode, epoch)
    }

    /// Same weights in another element type.
    pub fn cast<G: Scalar>(&self) -> Hgct<G> {
        Hgct {
            config: self.config.clone(),
            graph: self.graph.clone(),
            store: self.store.cast(),
            seed: self.seed,
            input_bn: self.input_bn.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }

    /// Row logits `[R, K]` for network rows `x[R, C_in, T, V]`, plus the
    /// intermediate feature maps of every stage.
    pub fn forward_traced(&self, s: &mut Session<'_, F>, x: Var) -> Result<ForwardTrace> {
        let shape = s.graph.shape(x).to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.c_in || shape[3] != cfg.v {
            return Err(Error::dim(format!(
                "model expects [B, {}, T, {}], got {shape:?}",
                cfg.c_in, cfg.v
            )));
        }
        let (b, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
        // normalise each (channel, joint) pair over batch and time
        let h = s.graph.permute(x, &[0, 1, 3, 2])?;
        let h = s.graph.reshape(h, &[b, c * v, t])?;
        let h = self.input_bn.forward(s, h)?;
        let h = s.graph.reshape(h, &[b, c, v, t])?;
        let mut h = s.graph.permute(h, &[0, 1, 3, 2])?;
        let mut traces = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            let mut stgc = Vec::with_capacity(stage.stgc.len());
            for block in &stage.stgc {
                h = block.forward(s, h)?;
                stgc.push(h);
            }
            let dstt = stage.dstt.forward_traced(s, h)?;
            h = s.graph.add(dstt.output, h)?;
            traces.push(StageTrace { stgc, dstt, output: h });
        }
        let width = s.graph.shape(h)[1];
        let pooled = s.graph.reshape(h, &[b, width, t * v])?;
        let pooled = s.graph.mean_axis(pooled, 2)?;
        let pooled = s.dropout(pooled, cfg.head_dropout)?;
        let logits = self.head.forward(s, pooled)?;
        Ok(ForwardTrace { logits, stages: traces })
    }

    pub fn forward(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.logits)
    }

    /// Sample logits `[B, K]`, averaging the rows of multi-body samples.
    pub fn forward_batch(&self, s: &mut Session<'_, F>, batch: &Batch<F>) -> Result<Var> {
        let x = s.input(batch.x.clone());
        let rows = self.forward(s, x)?;
        match &batch.pool {
            Some(p) => {
                let p = s.input(p.clone());
                s.graph.matmul(p, rows)
            }
            None => Ok(rows),
        }
    }

    /// Eval-mode sample logits as plain values.
    pub fn predict(&self, batch: &Batch<F>) -> Result<Tensor<F>> {
        let mut s = self.session(Mode::Eval, usize::MAX);
        let logits = self.forward_batch(&mut s, batch)?;
        Ok(s.graph.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_param_count() {
        assert_eq!(Linear::param_count(128, 120, true), 15_480);
    }

    #[test]
    fn pointwise_conv_macs() {
        // 1×1 conv 3 → 64 over 64 frames × 25 joints
        assert_eq!(crate::nn::Conv::macs(3, 64, 1, 1, 64, 25), 307_200);
    }

    #[test]
    fn gsa_score_macs() {
        let rows = 64;
        let (len, width) = (25, 96);
        assert_eq!((rows * len * len * width) as u64, 3_840_000);
        let full = Mhsa::macs(rows, len, width);
        assert_eq!(full, 4 * (rows * len * width * width) as u64 + 2 * 3_840_000);
    }

    use crate::dstt::Mhsa;

    #[test]
    fn stage_count_is_fixed() {
        let cfg = ModelConfig {
            stages: vec![128; 2],
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn multi_body_rows_are_averaged() {
        let mut coords = Tensor::zeros([3, 2, 25, 2]);
        coords.set(&[0, 0, 0, 0], 1.0);
        coords.set(&[0, 0, 0, 1], 2.0);
        let two = SkeletonSequence::new(coords, 0).unwrap();
        let mut coords = Tensor::zeros([3, 2, 25, 2]);
        coords.set(&[0, 0, 0, 0], 1.0);
        let one = SkeletonSequence::new(coords, 1).unwrap();
        let batch = Batch::<f64>::from_sequences(&[&two, &one]).unwrap();
        assert_eq!(batch.x.shape(), &[3, 3, 2, 25]);
        assert_eq!(batch.pool.unwrap().data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
    }
}
