// Synthetic eight-class skeleton task on the NTU-25 body graph.
//
// Class k swings limb k % 4 about its proximal joint at frequency k / 4.
// The phase is drawn per sample, so a class mean carries almost no trace of
// the frequency and a per-frame template cannot tell low from high.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SkeletonGraph, SkeletonSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Limb subtrees times frequencies.
pub const SYNTH_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: SYNTH_CLASSES,
            per_class: 250,
            test_per_class: 50,
            frames: 64,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

// Rest pose in metres, zero-based NTU joint order.
const REST_POSE: [[f64; 3]; 25] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.58, 0.0],
    [0.0, 0.72, 0.0],
    [0.18, 0.48, 0.0],
    [0.22, 0.22, 0.0],
    [0.24, 0.0, 0.0],
    [0.25, -0.07, 0.0],
    [-0.18, 0.48, 0.0],
    [-0.22, 0.22, 0.0],
    [-0.24, 0.0, 0.0],
    [-0.25, -0.07, 0.0],
    [0.1, -0.02, 0.0],
    [0.11, -0.42, 0.0],
    [0.11, -0.8, 0.0],
    [0.11, -0.85, 0.08],
    [-0.1, -0.02, 0.0],
    [-0.11, -0.42, 0.0],
    [-0.11, -0.8, 0.0],
    [-0.11, -0.85, 0.08],
    [0.0, 0.5, 0.0],
    [0.26, -0.13, 0.0],
    [0.22, -0.08, 0.03],
    [-0.26, -0.13, 0.0],
    [-0.22, -0.08, 0.03],
];

/// `(pivot, subtree root)` per limb: shoulder/elbow and hip/knee pairs.
const LIMBS: [(usize, usize); 4] = [(4, 5), (8, 9), (12, 13), (16, 17)];

/// Peak swing angle in radians.
const AMPLITUDE: f64 = 0.6;

/// Oscillation cycles over the sequence for the low and high classes.
const CYCLES: [f64; 2] = [1.0, 3.0];

fn sample(
    label: usize,
    spec: &SynthSpec,
    graph: &SkeletonGraph,
    subtrees: &[Vec<usize>],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    let limb = label % LIMBS.len();
    let cycles = CYCLES[label / LIMBS.len()];
    let (pivot, _) = LIMBS[limb];
    let phase = rng.random_range(0.0..TAU);
    let t = spec.frames;
    let v = graph.joints();
    let mut coords = Tensor::zeros([3, t, v, 1]);
    for ti in 0..t {
        let theta = AMPLITUDE * (TAU * cycles * ti as f64 / t as f64 + phase).sin();
        let (s, c) = theta.sin_cos();
        let p = REST_POSE[pivot];
        for (j, rest) in REST_POSE.iter().enumerate() {
            let mut xyz = *rest;
            if subtrees[limb].contains(&j) {
                // rotate about the x axis through the pivot (forward swing)
                let (dy, dz) = (xyz[1] - p[1], xyz[2] - p[2]);
                xyz[1] = p[1] + c * dy - s * dz;
                xyz[2] = p[2] + s * dy + c * dz;
            }
            for (ci, &x) in xyz.iter().enumerate() {
                coords.set(&[ci, ti, j, 0], x + noise.sample(rng));
            }
        }
    }
    SkeletonSequence::new(coords, label)
}

/// Generates `(train, test)` splits, deterministic in `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    if spec.per_class < 1 || spec.test_per_class < 1 {
        return Err(Error::config("synthetic data needs at least one sample per class"));
    }
    if spec.classes == 0 || spec.classes > SYNTH_CLASSES {
        return Err(Error::config(format!(
            "synthetic data supports 1..={SYNTH_CLASSES} classes, got {}",
            spec.classes
        )));
    }
    if spec.frames < 2 {
        return Err(Error::config("synthetic sequences need at least two frames"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma must be finite and non-negative"));
    }
    let graph = SkeletonGraph::ntu25();
    let subtrees: Vec<Vec<usize>> = LIMBS.iter().map(|&(_, root)| graph.subtree(root)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut build = |name: &str, n: usize| -> Result<DatasetSplit> {
        let samples = (0..n * spec.classes)
            .map(|i| sample(i % spec.classes, spec, &graph, &subtrees, &noise, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        DatasetSplit::new(name, spec.classes, samples)
    };
    let train = build("train", spec.per_class)?;
    let test = build("test", spec.test_per_class)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            per_class: 3,
            test_per_class: 2,
            frames: 16,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(synth_dataset(&small(5)).unwrap(), synth_dataset(&small(5)).unwrap());
        assert_ne!(synth_dataset(&small(5)).unwrap().0, synth_dataset(&small(6)).unwrap().0);
    }

    #[test]
    fn classes_are_balanced() {
        let (train, test) = synth_dataset(&small(1)).unwrap();
        assert_eq!(train.class_histogram(), vec![3; 8]);
        assert_eq!(test.class_histogram(), vec![2; 8]);
    }

    #[test]
    fn zero_per_class_is_a_config_error() {
        let spec = SynthSpec { per_class: 0, ..small(0) };
        assert!(matches!(synth_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_samples_move_only_their_limb() {
        let spec = SynthSpec { noise_sigma: 0.0, ..small(2) };
        let (train, _) = synth_dataset(&spec).unwrap();
        let graph = SkeletonGraph::ntu25();
        let s = &train.samples()[0]; // label 0: left arm
        let moving = graph.subtree(5);
        for j in 0..25 {
            let still = (0..16).all(|t| (0..3).all(|c| s.at(c, t, j, 0) == REST_POSE[j][c]));
            assert_eq!(still, !moving.contains(&j), "joint {j}");
        }
    }
}
