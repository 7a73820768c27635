// Preprocessing and modality derivation. All transforms are pure.

use rand::Rng;

use super::{SkeletonGraph, SkeletonSequence};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Fraction of frames a training crop keeps at minimum.
const MIN_CROP: f64 = 0.9;

/// `round(linspace(start, start + len - 1, t_out))`.
fn linspace_indices(start: usize, len: usize, t_out: usize) -> Vec<usize> {
    if t_out == 1 {
        return vec![start];
    }
    let span = (len - 1) as f64;
    (0..t_out)
        .map(|i| start + (i as f64 * span / (t_out - 1) as f64).round() as usize)
        .collect()
}

/// Frame indices chosen by [`resample`]; non-decreasing in both modes.
pub fn resample_indices(t: usize, t_out: usize, mode: Mode, rng: &mut impl Rng) -> Vec<usize> {
    assert!(t >= 1 && t_out >= 1, "resampling needs at least one frame");
    match mode {
        Mode::Eval => linspace_indices(0, t, t_out),
        Mode::Train => {
            let min_len = ((t as f64 * MIN_CROP).ceil() as usize).clamp(1, t);
            let len = rng.random_range(min_len..=t);
            let start = rng.random_range(0..=t - len);
            linspace_indices(start, len, t_out)
        }
    }
}

/// Resamples a sequence to `t_out` frames. Eval mode is deterministic; train
/// mode takes a random contiguous crop of at least 90% of the frames first.
pub fn resample(seq: &SkeletonSequence, t_out: usize, mode: Mode, rng: &mut impl Rng) -> SkeletonSequence {
    let idx = resample_indices(seq.frames(), t_out, mode, rng);
    let (c, v, m) = (seq.channels(), seq.joints(), seq.bodies());
    let src = seq.coords();
    let out = Tensor::from_fn([c, t_out, v, m], |i| src.at(&[i[0], idx[i[1]], i[2], i[3]]));
    seq.with_coords(out)
}

/// Subtracts the center joint of the first frame of the first body from every
/// tracked frame. Untracked (all-zero) body frames stay zero.
pub fn center(seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<SkeletonSequence> {
    check_joints(seq, graph)?;
    if !(0..seq.bodies()).any(|m| seq.body_nonzero(m)) {
        log::warn!("centering an all-zero sample; returned unchanged");
        return Ok(seq.clone());
    }
    let (c, t, v, m) = (seq.channels(), seq.frames(), seq.joints(), seq.bodies());
    let origin: Vec<f64> = (0..c).map(|ci| seq.at(ci, 0, graph.center(), 0)).collect();
    let present: Vec<Vec<bool>> = (0..t).map(|ti| (0..m).map(|mi| seq.body_present(ti, mi)).collect()).collect();
    let src = seq.coords();
    let out = Tensor::from_fn([c, t, v, m], |i| {
        let x = src.at(i);
        if present[i[1]][i[3]] {
            x - origin[i[0]]
        } else {
            x
        }
    });
    Ok(seq.with_coords(out))
}

/// Parent-relative joint offsets; the center joint maps to zero.
pub fn to_bone(seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<SkeletonSequence> {
    check_joints(seq, graph)?;
    let src = seq.coords();
    let out = Tensor::from_fn(src.shape().to_vec(), |i| match graph.parent(i[2]) {
        Some(p) => src.at(i) - src.at(&[i[0], i[1], p, i[3]]),
        None => 0.0,
    });
    Ok(seq.with_coords(out))
}

/// Forward frame differences; the final frame is zero.
pub fn to_motion(seq: &SkeletonSequence) -> SkeletonSequence {
    let src = seq.coords();
    let t = seq.frames();
    let out = Tensor::from_fn(src.shape().to_vec(), |i| {
        if i[1] + 1 < t {
            src.at(&[i[0], i[1] + 1, i[2], i[3]]) - src.at(i)
        } else {
            0.0
        }
    });
    seq.with_coords(out)
}

fn check_joints(seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<()> {
    if seq.joints() != graph.joints() {
        return Err(Error::Schema(format!(
            "sample has {} joints, graph has {}",
            seq.joints(),
            graph.joints()
        )));
    }
    Ok(())
}
