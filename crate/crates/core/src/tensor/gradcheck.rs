//! Central-difference gradient oracle for the autodiff graph.
//!
//! Each derivative is the Richardson combination `(4·D(h/2) − D(h)) / 3` of
//! two central differences, which is fourth-order accurate.
//!
//! The oracle only ever evaluates forward passes; it never looks at how the
//! graph computes gradients. Coordinates whose `±h` perturbation flips a ReLU
//! mask or a max-pool winner sit on a non-differentiable point and are
//! skipped (and counted).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Step used when none is given.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Absolute floor of the relative-error denominator.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Fraction of the largest probed gradient entry that also floors the
/// denominator, so round-off on near-zero entries is judged against the
/// gradient's own scale.
pub const SCALE_FLOOR: f64 = 1e-4;

/// A built forward pass: its graph, its scalar output and the leaf handles
/// in the same order as the tensors it was built from.
pub struct Probe {
    pub graph: Graph<f64>,
    pub loss: Var,
    pub leaves: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub skipped: usize,
    /// `(leaf, coordinate, autodiff, finite difference)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }

    /// Folds another report into this one, keeping the worst entry.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coordinates += other.coordinates;
        self.skipped += other.skipped;
        if other.worst.is_some()
            && (self.worst.is_none() || other.max_relative_error > self.max_relative_error)
        {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            coordinates: 0,
            skipped: 0,
            worst: None,
        }
    }
}

pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    scaled_relative_error(autodiff, numeric, 0.0)
}

/// `|a − n| / max(|a|, |n|, SCALE_FLOOR·scale, RELATIVE_FLOOR)`.
pub fn scaled_relative_error(autodiff: f64, numeric: f64, scale: f64) -> f64 {
    let denom = autodiff.abs().max(numeric.abs()).max(SCALE_FLOOR * scale).max(RELATIVE_FLOOR);
    (autodiff - numeric).abs() / denom
}

fn scalar_of(probe: &Probe) -> Result<f64> {
    let value = probe.graph.value(probe.loss);
    if value.numel() != 1 {
        return Err(Error::Oracle(format!(
            "function output has shape {:?}, expected a scalar",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Compares autodiff gradients of `build` against central differences for
/// every coordinate of every leaf.
///
/// `build` must insert the given tensors as gradient-requiring leaves and
/// return them in the same order.
pub fn check_with(
    leaves: &[Tensor<f64>],
    build: impl Fn(&[Tensor<f64>]) -> Result<Probe>,
    h: f64,
) -> Result<GradCheckReport> {
    check_selected(leaves, build, h, |_, numel| (0..numel).collect())
}

/// As [`check_with`], probing only the coordinates `select(leaf, numel)`
/// of each leaf.
pub fn check_selected(
    leaves: &[Tensor<f64>],
    build: impl Fn(&[Tensor<f64>]) -> Result<Probe>,
    h: f64,
    select: impl Fn(usize, usize) -> Vec<usize>,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step {h} must be positive and finite")));
    }
    let base = build(leaves)?;
    if base.leaves.len() != leaves.len() {
        return Err(Error::Oracle(format!(
            "built {} leaves from {} tensors",
            base.leaves.len(),
            leaves.len()
        )));
    }
    scalar_of(&base)?;
    let signature = base.graph.kink_signature();
    let grads = base.graph.backward(base.loss)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut compared = Vec::new();
    for (li, (&var, leaf)) in base.leaves.iter().zip(leaves).enumerate() {
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for ci in select(li, leaf.numel()) {
            let orig = leaf.data()[ci];
            // central differences at h and h/2, combined to cancel the h² term
            let mut diffs = [0.0; 2];
            let mut kinked = false;
            for (slot, step) in [h, h / 2.0].into_iter().enumerate() {
                work[li].data_mut()[ci] = orig + step;
                let plus = build(&work)?;
                work[li].data_mut()[ci] = orig - step;
                let minus = build(&work)?;
                work[li].data_mut()[ci] = orig;
                let (fp, fm) = (scalar_of(&plus)?, scalar_of(&minus)?);
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::Oracle(format!(
                        "non-finite function value at leaf {li} coordinate {ci}"
                    )));
                }
                kinked |= plus.graph.kink_signature() != signature || minus.graph.kink_signature() != signature;
                diffs[slot] = (fp - fm) / (2.0 * step);
            }
            report.coordinates += 1;
            if kinked {
                report.skipped += 1;
                continue;
            }
            compared.push((li, ci, analytic[ci], (4.0 * diffs[1] - diffs[0]) / 3.0));
        }
    }
    let scale = compared.iter().map(|c| c.2.abs()).fold(0.0, f64::max);
    for (li, ci, a, n) in compared {
        let err = scaled_relative_error(a, n, scale);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((li, ci, a, n));
        }
    }
    Ok(report)
}

/// Maximum relative error between the autodiff gradient of `f` at `x` and
/// its central-difference estimate with step `h`.
pub fn finite_difference_check(
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let report = check_with(
        std::slice::from_ref(x),
        |leaves| {
            let mut graph = Graph::new();
            graph.track_kinks(true);
            let leaf = graph.leaf(leaves[0].clone(), true);
            let loss = f(&mut graph, leaf)?;
            Ok(Probe {
                graph,
                loss,
                leaves: vec![leaf],
            })
        },
        h,
    )?;
    Ok(report.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_up_to_round_off() {
        let x = Tensor::from_f64([4], &[0.3, -1.0, 2.5, 7.0]).unwrap();
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &x, DEFAULT_STEP).unwrap();
        // no truncation error; round-off is about eps·|f|/h
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_is_second_order_accurate() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detach hides the dependence from autodiff but not from the oracle
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let d = g.detach(x);
                let sq = g.mul(x, d)?;
                Ok(g.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn non_scalar_output_is_an_oracle_error() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let res = finite_difference_check(|_, x| Ok(x), &x, DEFAULT_STEP);
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn non_finite_values_are_an_oracle_error() {
        let x = Tensor::from_f64([1], &[0.5]).unwrap();
        let res = finite_difference_check(
            |g, x| {
                let bad = g.constant(Tensor::from_f64([1], &[f64::NAN]).unwrap());
                let y = g.mul(x, bad)?;
                Ok(g.sum(y))
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }
}
