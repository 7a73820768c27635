// Learning-rate schedule, label-smoothed cross-entropy and SGD with momentum.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Learning rate at optimiser step `step` (zero-based).
///
/// The first `warmup_epochs` ramp linearly per step from `lr0 / warmup_steps`
/// to `lr0`; afterwards the rate is `lr0 · decay^k` with `k` the number of
/// milestones already reached.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warmup = cfg.warmup_epochs * spe;
    if step < warmup {
        return cfg.lr0 * (step + 1) as f64 / warmup as f64;
    }
    let epoch = step / spe;
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr0 * cfg.decay.powi(passed as i32)
}

/// `−mean_b Σ_k q[b,k] · log_softmax(logits)[b,k]` with
/// `q = (1 − ε)·onehot + ε/K`.
pub fn label_smoothed_ce<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing {eps} must lie in [0, 1]")));
    }
    let off = eps / k as f64;
    let target = Tensor::from_fn([b, k], |i| F::of(if labels[i[0]] == i[1] { 1.0 - eps + off } else { off }));
    let logp = g.log_softmax(logits, 1)?;
    let q = g.constant(target);
    let weighted = g.mul(logp, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, F::of(-1.0 / b as f64)))
}

/// Momentum buffers, one per parameter that has received a gradient.
#[derive(Clone, Debug, Default)]
pub struct SgdState<F> {
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> SgdState<F> {
    pub fn new() -> Self {
        SgdState { velocity: Vec::new() }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[F]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v` for every parameter holding a
/// gradient. Parameters without one (frozen or unused) are left untouched,
/// momentum included. Weight decay applies only to kinds that decay.
pub fn sgd_step<F: Scalar>(store: &mut ParamStore<F>, state: &mut SgdState<F>, lr: f64, cfg: &TrainConfig) {
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    let (m, wd, lr) = (F::of(cfg.momentum), F::of(cfg.weight_decay), F::of(lr));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some(grad) = store.grad(id).map(<[F]>::to_vec) else {
            continue;
        };
        let decays = store.entry(id).kind.decays();
        let vel = state.velocity[id.index()].get_or_insert_with(|| vec![F::zero(); grad.len()]);
        let p = store.value_mut(id).data_mut();
        for ((pv, vv), &gv) in p.iter_mut().zip(vel.iter_mut()).zip(&grad) {
            let g = if decays { gv + wd * *pv } else { gv };
            *vv = m * *vv + g;
            *pv -= lr * *vv;
        }
    }
}
