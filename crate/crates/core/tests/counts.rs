use hgct_core::dstt::DsttConfig;
use hgct_core::model::{count_flops, count_params, Batch};
use hgct_core::nn::Mode;
use hgct_core::skeleton::SkeletonSequence;
use hgct_core::{Hgct, ModelConfig, SkeletonGraph, Tensor, TopologyMode};
use proptest::prelude::*;
use rand::SeedableRng;

fn config(c_e: usize, alpha: f64, gamma: usize, blocks: usize, mode: TopologyMode, classes: usize, v: usize) -> ModelConfig {
    let mut dstt = DsttConfig {
        c_e,
        alpha,
        gamma,
        ..DsttConfig::default()
    };
    dstt.fit_heads(3, 2);
    ModelConfig {
        stages: vec![c_e; 3],
        stgc_blocks: blocks,
        dstt,
        topology: mode,
        num_classes: classes,
        v,
        ..ModelConfig::default()
    }
}

fn topology() -> impl Strategy<Value = TopologyMode> {
    prop::sample::select(TopologyMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_form_count_matches_registered_tensors(
        c_e in prop::sample::select(vec![8usize, 16, 24, 32]),
        alpha in prop::sample::select(vec![0.25, 0.5]),
        gamma in 1usize..=4,
        blocks in 1usize..=2,
        mode in topology(),
        classes in 1usize..20,
        v in 3usize..9,
    ) {
        let cfg = config(c_e, alpha, gamma, blocks, mode, classes, v);
        let model = Hgct::<f32>::new(cfg.clone(), SkeletonGraph::chain(v, v / 2).unwrap(), 0).unwrap();
        prop_assert_eq!(count_params(&cfg).unwrap(), model.param_count());
    }
}

#[test]
fn default_model_sits_in_the_budget() {
    let cfg = ModelConfig::default();
    let model = Hgct::<f32>::new(cfg.clone(), SkeletonGraph::ntu25(), 0).unwrap();
    assert_eq!(model.param_count(), count_params(&cfg).unwrap());
    assert!((790_000..=1_070_000).contains(&model.param_count()));
}

#[test]
fn block_costs_add_up() {
    let report = count_flops(&ModelConfig::default(), 64, 25).unwrap();
    assert_eq!(report.blocks.iter().map(|b| b.macs).sum::<u64>(), report.macs);
    assert_eq!(report.blocks.iter().map(|b| b.params).sum::<usize>(), report.params);
    assert_eq!(report.flops_2x, 2 * report.macs);
}

#[test]
fn macs_scale_linearly_in_frames_without_attention() {
    // only the temporal attention term is quadratic in T
    let cfg = ModelConfig::default();
    let at = |t| count_flops(&cfg, t, 25).unwrap();
    let (a, b) = (at(32), at(64));
    let quad = |r: &hgct_core::model::CostReport| r.blocks.iter().filter(|b| b.name.ends_with("dstt")).map(|b| b.macs).sum::<u64>();
    let linear = |r: &hgct_core::model::CostReport| r.macs - quad(r);
    // the head is frame-independent
    let head = (128 * 120) as u64;
    assert_eq!(2 * (linear(&a) - head), linear(&b) - head);
    assert!(quad(&b) > 2 * quad(&a));
}

#[test]
fn analytic_macs_match_the_traced_forward() {
    let cfg = config(16, 0.25, 2, 1, TopologyMode::Scaled, 5, 7);
    let graph = SkeletonGraph::chain(7, 3).unwrap();
    let model = Hgct::<f64>::new(cfg.clone(), graph, 0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let seq = SkeletonSequence::new(Tensor::randn([3, 12, 7, 1], 1.0, &mut rng), 0).unwrap();
    let batch = Batch::<f64>::from_sequences(&[&seq]).unwrap();
    let mut s = model.session(Mode::Eval, 0);
    model.forward_batch(&mut s, &batch).unwrap();
    assert_eq!(s.graph.macs(), count_flops(&cfg, 12, 7).unwrap().macs);
}
