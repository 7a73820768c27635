//! Fixtures shared by the benchmarks: seeded inputs and the reduced model.

use hgct_core::dstt::DsttConfig;
use hgct_core::model::Batch;
use hgct_core::skeleton::{center, synth_dataset, SynthSpec};
use hgct_core::{Hgct, ModelConfig, SkeletonGraph, SkeletonSequence, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::<f32>::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Stage width and `C_e` of 32, one graph-conv block per stage, 8 classes.
pub fn reduced_config() -> ModelConfig {
    let mut dstt = DsttConfig {
        c_e: 32,
        ..DsttConfig::default()
    };
    dstt.fit_heads(3, 2);
    ModelConfig {
        stages: vec![32; 3],
        stgc_blocks: 1,
        dstt,
        num_classes: 8,
        ..ModelConfig::default()
    }
}

pub fn reduced_model() -> Hgct<f32> {
    Hgct::new(reduced_config(), SkeletonGraph::ntu25(), 0).expect("valid reduced config")
}

/// `batch` centred synthetic samples of `frames` frames.
pub fn synth_batch(batch: usize, frames: usize) -> Batch<f32> {
    let spec = SynthSpec {
        per_class: batch.div_ceil(8),
        test_per_class: 1,
        frames,
        ..SynthSpec::default()
    };
    let (train, _) = synth_dataset(&spec).expect("valid synthetic spec");
    let graph = SkeletonGraph::ntu25();
    let seqs: Vec<SkeletonSequence> = train.samples()[..batch]
        .iter()
        .map(|s| center(s, &graph).expect("25-joint samples"))
        .collect();
    let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs).expect("uniform batch")
}
