// Checks shared by the property tests and the acceptance run. Each panics on
// violation so both harnesses report the assertion message.
#![allow(dead_code)]

use hgct_core::dstt::{DsttBlock, DsttConfig, Mhsa};
use hgct_core::model::{load_checkpoint, Batch};
use hgct_core::nn::{Mode, ParamStore, Session};
use hgct_core::skeleton::{synth_dataset, to_bone, Modality, SynthSpec};
use hgct_core::stgc::{StgcBlock, StgcConfig};
use hgct_core::topology::build_partitions;
use hgct_core::train::{preprocess, resample_split, train, TrainOutputs};
use hgct_core::{DType, DatasetSplit, Hgct, ModelConfig, TrainConfig};
use hgct_core::{SkeletonGraph, SkeletonSequence, Tensor, TopologyMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x[.., i]` of the result is `x[.., perm[i]]` on the last axis.
fn permute_joints(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let v = *x.shape().last().unwrap();
    let d = x.data();
    let out: Vec<f64> = (0..d.len()).map(|i| d[i - i % v + perm[i % v]]).collect();
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn small_dstt() -> DsttConfig {
    DsttConfig {
        c_e: 16,
        alpha: 0.25,
        s_heads: 3,
        t_heads: 2,
        gamma: 2,
        use_joint_type: false,
        use_frame_order: false,
        ..DsttConfig::default()
    }
}

pub fn attention_rows_are_distributions() {
    let mut store = ParamStore::<f64>::new();
    let mha = Mhsa::new(&mut store, &mut rng(1), "a", 12, 3).unwrap();
    let mut s = Session::new(&store, Mode::Eval, 0);
    let x = s.input(Tensor::randn([2, 7, 12], 1.5, &mut rng(2)));
    let (_, w) = mha.forward_with_weights(&mut s, x, 0.0).unwrap();
    let w = s.graph.value(w);
    assert_eq!(w.shape(), &[2, 3, 7, 7]);
    for row in w.data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
    }
}

pub fn global_spatial_attention_commutes_with_joint_relabelling() {
    let mut store = ParamStore::<f64>::new();
    let cfg = small_dstt();
    let block = DsttBlock::new(&mut store, &mut rng(3), "d", &cfg, 16, 6, false).unwrap();
    let x = Tensor::randn([2, cfg.c_s(), 4, 6], 1.0, &mut rng(4));
    let perm = [3, 0, 5, 1, 4, 2];
    let run = |x: Tensor<f64>| {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.input(x);
        let y = block.spatial_attention(&mut s, x).unwrap();
        s.graph.value(y).clone()
    };
    let lhs = run(permute_joints(&x, &perm));
    let rhs = permute_joints(&run(x), &perm);
    assert!(lhs.max_abs_diff(&rhs) < TOL, "{}", lhs.max_abs_diff(&rhs));
}

pub fn graph_conv_commutes_with_conjugated_topology() {
    let graph = SkeletonGraph::chain(6, 2).unwrap();
    let perm = [4, 2, 0, 5, 1, 3];
    let relabelled = graph.permuted(&perm).unwrap();
    for mode in TopologyMode::ALL {
        let cfg = StgcConfig::new(3, 8, mode);
        let build = |g: &SkeletonGraph| {
            let mut store = ParamStore::<f64>::new();
            let block = StgcBlock::new(&mut store, &mut rng(5), "b", &cfg, &build_partitions(g)).unwrap();
            (store, block)
        };
        let (s0, b0) = build(&graph);
        let (s1, b1) = build(&relabelled);
        let x = Tensor::randn([2, 3, 10, 6], 1.0, &mut rng(6));
        // train mode: batch statistics pool over joints, so relabelling is harmless
        let run = |store: &ParamStore<f64>, block: &StgcBlock, x: Tensor<f64>| {
            let mut s = Session::new(store, Mode::Train, 100);
            let x = s.input(x);
            let y = block.forward(&mut s, x).unwrap();
            s.graph.value(y).clone()
        };
        let lhs = run(&s1, &b1, permute_joints(&x, &perm));
        let rhs = permute_joints(&run(&s0, &b0, x), &perm);
        assert!(lhs.max_abs_diff(&rhs) < TOL, "{mode:?}: {}", lhs.max_abs_diff(&rhs));
    }
}

pub fn depthwise_mixing_keeps_channels_apart() {
    let mut store = ParamStore::<f64>::new();
    let block = DsttBlock::new(&mut store, &mut rng(7), "d", &small_dstt(), 16, 5, false).unwrap();
    let dw = &block.cwff.depthwise;
    let hidden = 32;
    let x = Tensor::randn([1, hidden, 6, 5], 1.0, &mut rng(8));
    let run = |x: Tensor<f64>| {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.input(x);
        let y = dw.forward(&mut s, x).unwrap();
        s.graph.value(y).clone()
    };
    let base = run(x.clone());
    let mut bumped = x.clone();
    bumped.set(&[0, 11, 3, 2], x.at(&[0, 11, 3, 2]) + 1.0);
    let moved = run(bumped);
    for c in 0..hidden {
        for t in 0..6 {
            for v in 0..5 {
                let changed = (moved.at(&[0, c, t, v]) - base.at(&[0, c, t, v])).abs() > 0.0;
                // a 3-tap kernel reaches one frame either side of the bump
                let reachable = c == 11 && v == 2 && (2..=4).contains(&t);
                assert!(!changed || reachable, "channel {c} frame {t} joint {v} moved");
            }
        }
    }
}

pub fn bones_sum_back_to_joint_offsets() {
    let graph = SkeletonGraph::ntu25();
    let coords = Tensor::randn([3, 4, 25, 1], 0.5, &mut rng(9));
    let seq = SkeletonSequence::new(coords, 0).unwrap();
    let bone = to_bone(&seq, &graph).unwrap();
    let root = graph.center();
    for t in 0..4 {
        for v in 0..25 {
            for c in 0..3 {
                let (mut j, mut sum) = (v, 0.0);
                while let Some(p) = graph.parent(j) {
                    sum += bone.at(c, t, j, 0);
                    j = p;
                }
                let offset = seq.at(c, t, v, 0) - seq.at(c, t, root, 0);
                assert!((sum - offset).abs() < 1e-12, "joint {v} channel {c}");
            }
        }
    }
}

/// Three stages of width 8 with one graph-conv block each.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        stages: vec![8; 3],
        stgc_blocks: 1,
        dstt: DsttConfig {
            c_e: 8,
            s_heads: 2,
            t_heads: 2,
            gamma: 2,
            ..DsttConfig::default()
        },
        num_classes: 8,
        ..ModelConfig::default()
    }
}

/// Synthetic splits with `per_class` training samples and one test sample per class.
pub fn tiny_data(per_class: usize) -> (DatasetSplit, DatasetSplit) {
    synth_dataset(&SynthSpec {
        per_class,
        test_per_class: 1,
        frames: 12,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn tiny_recipe(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        milestones: vec![],
        warmup_epochs: 0,
        batch_size: 4,
        frames: 8,
        dtype: DType::F64,
        ..TrainConfig::default()
    }
}

pub fn same_seed_gives_identical_runs() {
    let (tr, te) = tiny_data(1);
    let run = || {
        let mut model = Hgct::<f64>::new(tiny_model(), SkeletonGraph::ntu25(), 3).unwrap();
        let r = train(&mut model, &tiny_recipe(2), &tr, &te, &TrainOutputs::default()).unwrap();
        (r, model.store)
    };
    let (ra, sa) = run();
    let (rb, sb) = run();
    let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra.loss_trace), bits(&rb.loss_trace));
    assert_eq!(bits(&ra.lr_trace), bits(&rb.lr_trace));
    for (a, b) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!((a.train_loss.to_bits(), a.test_accuracy), (b.train_loss.to_bits(), b.test_accuracy));
    }
    for (a, b) in sa.entries().iter().zip(sb.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

pub fn checkpoints_restore_weights_and_predictions_bit_for_bit() {
    let (tr, te) = tiny_data(1);
    let mut model = Hgct::<f32>::new(tiny_model(), SkeletonGraph::ntu25(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let outputs = TrainOutputs {
        checkpoint: Some(path.clone()),
    };
    let recipe = TrainConfig {
        dtype: DType::F32,
        ..tiny_recipe(1)
    };
    train(&mut model, &recipe, &tr, &te, &outputs).unwrap();
    let (loaded, meta) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(meta.epoch, 1);
    assert_eq!(loaded.store.stat_steps(), model.store.stat_steps());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in model.store.entries().iter().zip(loaded.store.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let test = resample_split(&preprocess(&te, &model.graph, Modality::Joint).unwrap(), 8).unwrap();
    let refs: Vec<&SkeletonSequence> = test.samples().iter().collect();
    let batch = Batch::<f32>::from_sequences(&refs).unwrap();
    assert_eq!(bits(&model.predict(&batch).unwrap()), bits(&loaded.predict(&batch).unwrap()));
}
