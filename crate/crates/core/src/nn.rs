//! Named parameter storage, the forward-pass session and primitive layers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, ConvSpec, Gradients, Graph, Scalar, Tensor, Var};

/// Normalisation epsilon for batch and layer norms.
pub const NORM_EPS: f64 = 1e-5;

/// Exponential-moving-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is, which decides whether it is learnable and
/// whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
    Lambda,
    Adjacency,
    /// Non-learnable state saved with the model (running statistics, fixed graphs).
    Buffer,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::Weight | ParamKind::Bias | ParamKind::Lambda | ParamKind::Adjacency
        )
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
}

/// Flat, insertion-ordered store of every named tensor in a model.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, ParamId>,
    stat_steps: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            stat_steps: 0,
        }
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.id(name).map(|id| &mut self.entries[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_learnable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Adds the parameter gradients of one backward pass into the stored
    /// gradients. Repeated calls accumulate until [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, backward: &Backward<F>) {
        for &(id, var) in &backward.params {
            if let Some(g) = backward.grads.get(var) {
                let slot = self.entries[id.0]
                    .grad
                    .get_or_insert_with(|| vec![F::zero(); g.len()]);
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Folds batch statistics into the running mean and variance buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<F>]) {
        if updates.is_empty() {
            return;
        }
        let m = F::of(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (r, &b) in self.entries[u.mean.0].value.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.entries[u.var.0].value.data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b;
            }
        }
        self.stat_steps += 1;
    }

    /// Number of times running statistics have been updated.
    pub fn stat_steps(&self) -> u64 {
        self.stat_steps
    }

    pub(crate) fn set_stat_steps(&mut self, steps: u64) {
        self.stat_steps = steps;
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
            stat_steps: self.stat_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct StatUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchNormStats<F>,
}

/// One forward pass: a fresh graph plus read-only access to the parameters.
///
/// Parameters are bound into the graph lazily, at most once each. Batch-norm
/// statistics produced in training mode are collected rather than applied,
/// so the store stays untouched until the caller decides to commit them.
pub struct Session<'s, F: Scalar> {
    pub graph: Graph<F>,
    store: &'s ParamStore<F>,
    bound: HashMap<(ParamId, bool), Var>,
    mode: Mode,
    epoch: usize,
    rng: ChaCha8Rng,
    stat_updates: Vec<StatUpdate<F>>,
    warned_stats: bool,
}

impl<'s, F: Scalar> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: Mode, epoch: usize) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            mode,
            epoch,
            rng: ChaCha8Rng::seed_from_u64(0),
            stat_updates: Vec::new(),
            warned_stats: false,
        }
    }

    /// Seeds the stream used for dropout masks.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }

    /// Inverted dropout in training mode; identity otherwise or when `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode != Mode::Train || p == 0.0 {
            return Ok(x);
        }
        self.graph.dropout(x, p, &mut self.rng)
    }

    /// Binds a parameter; learnable kinds receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        let learnable = self.store.entry(id).kind.is_learnable();
        self.bind(id, learnable)
    }

    /// Binds a parameter as a constant, blocking its gradient.
    pub fn frozen(&mut self, id: ParamId) -> Var {
        self.bind(id, false)
    }

    fn bind(&mut self, id: ParamId, requires_grad: bool) -> Var {
        if let Some(&v) = self.bound.get(&(id, requires_grad)) {
            return v;
        }
        let v = self.graph.leaf(self.store.value(id).clone(), requires_grad);
        self.bound.insert((id, requires_grad), v);
        v
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.graph.constant(value)
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<F>) {
        self.stat_updates.push(update);
    }

    pub(crate) fn warn_uninitialised_stats(&mut self) {
        if !self.warned_stats && self.store.stat_steps() == 0 {
            log::warn!("evaluating batch norms before any training step; using initial statistics (mean 0, var 1)");
            self.warned_stats = true;
        }
    }

    pub fn stat_updates(&self) -> &[StatUpdate<F>] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<F>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Runs the reverse sweep and pairs leaf gradients with their parameters.
    pub fn backward(&self, loss: Var) -> Result<Backward<F>> {
        let grads = self.graph.backward(loss)?;
        let mut params: Vec<(ParamId, Var)> = self
            .bound
            .iter()
            .filter(|((_, rg), _)| *rg)
            .map(|(&(id, _), &v)| (id, v))
            .collect();
        params.sort();
        Ok(Backward { grads, params })
    }

    /// Graph handles of every parameter bound with gradients, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<(ParamId, Var)> = self
            .bound
            .iter()
            .filter(|((_, rg), _)| *rg)
            .map(|(&(id, _), &v)| (id, v))
            .collect();
        v.sort();
        v
    }

    pub fn into_graph(self) -> Graph<F> {
        self.graph
    }
}

pub struct Backward<F> {
    pub grads: Gradients<F>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Backward<F> {
    pub fn param_grad(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads.get(v))
    }

    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, 2 / fan_in)`.
    KaimingNormal,
    /// `U(±sqrt(6 / (fan_in + fan_out)))`.
    XavierUniform,
    Normal(f64),
    Zeros,
}

impl Init {
    fn sample<F: Scalar>(self, shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
        match self {
            Init::KaimingNormal => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::XavierUniform => Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `(k_t × 1)` convolution layer over `[B, C, T, V]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k_t: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k_t: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::config(format!(
                "{name}: groups {} must divide {c_in} → {c_out}",
                spec.groups
            )));
        }
        let cin_g = c_in / spec.groups;
        let shape = vec![c_out, cin_g, k_t, 1];
        let w = init.sample(shape, cin_g * k_t, c_out / spec.groups * k_t, rng);
        let weight = store.register(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([c_out]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            spec,
            c_in,
            c_out,
            k_t,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, k_t: usize, groups: usize, bias: bool) -> usize {
        c_out * (c_in / groups) * k_t + if bias { c_out } else { 0 }
    }

    pub fn macs(c_in: usize, c_out: usize, k_t: usize, groups: usize, t: usize, v: usize) -> u64 {
        (c_out * (c_in / groups) * k_t * t * v) as u64
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv_tv(x, w, b, self.spec)
    }
}

/// Affine map over the last axis: `x[..., in] · W[in, out] + b[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = init.sample(vec![d_in, d_out], d_in, d_out, rng);
        let weight = store.register(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-channel batch normalisation of `[B, C, ...]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Self::with_gain(store, name, channels, 1.0)
    }

    /// Batch norm whose affine gain starts at `gain` instead of one.
    pub fn with_gain<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize, gain: f64) -> Result<Self> {
        Ok(BatchNorm {
            gain: store.register(format!("{name}.gain"), ParamKind::NormGain, Tensor::full([channels], F::of(gain)))?,
            bias: store.register(format!("{name}.bias"), ParamKind::NormBias, Tensor::zeros([channels]))?,
            running_mean: store.register(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros([channels]))?,
            running_var: store.register(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones([channels]))?,
            channels,
        })
    }

    pub const PARAMS_PER_CHANNEL: usize = 2;

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        if s.is_train() {
            let (y, stats) = s.graph.batch_norm(x, g, b, None, NORM_EPS)?;
            if let Some(stats) = stats {
                s.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
            }
            Ok(y)
        } else {
            s.warn_uninitialised_stats();
            let store = s.store();
            let (rm, rv) = (store.value(self.running_mean).data(), store.value(self.running_var).data());
            let (y, _) = s.graph.batch_norm(x, g, b, Some((rm, rv)), NORM_EPS)?;
            Ok(y)
        }
    }
}

/// Layer normalisation along one axis with per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(format!("{name}.gain"), ParamKind::NormGain, Tensor::ones([channels]))?,
            bias: store.register(format!("{name}.bias"), ParamKind::NormBias, Tensor::zeros([channels]))?,
            channels,
        })
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var, axis: usize) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.graph.layer_norm(x, axis, g, b, NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", ParamKind::Weight, Tensor::zeros([1])).unwrap();
        assert!(store.register("a", ParamKind::Bias, Tensor::zeros([1])).is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("w", ParamKind::Weight, Tensor::from_f64([2], &[1.0, 2.0]).unwrap())
            .unwrap();
        for expected in [[2.0, 4.0], [4.0, 8.0]] {
            let back = {
                let mut s = Session::new(&store, Mode::Train, 0);
                let w = s.param(id);
                let sq = s.graph.mul(w, w).unwrap();
                let loss = s.graph.sum(sq);
                s.backward(loss).unwrap()
            };
            store.accumulate(&back);
            assert_eq!(store.grad(id).unwrap(), &expected);
        }
        store.zero_grad();
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn frozen_binding_blocks_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", ParamKind::Adjacency, Tensor::ones([3])).unwrap();
        let mut s = Session::new(&store, Mode::Train, 0);
        let w = s.frozen(id);
        let loss = s.graph.sum(w);
        let back = s.backward(loss).unwrap();
        assert!(back.param_grad(id).is_none());
    }

    #[test]
    fn batch_norm_commits_running_stats_only_on_request() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let updates = {
            let mut s = Session::new(&store, Mode::Train, 0);
            let x = s.input(Tensor::from_f64([2, 1, 1, 1], &[1.0, 3.0]).unwrap());
            bn.forward(&mut s, x).unwrap();
            s.take_stat_updates()
        };
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        store.apply_stat_updates(&updates);
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2: 0.9·1 + 0.1·2
        assert!((store.value(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
        assert_eq!(store.stat_steps(), 1);
    }

    #[test]
    fn eval_batch_norm_with_initial_stats_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let input = Tensor::from_f64([1, 2, 1, 2], &[0.5, -1.0, 3.0, 2.0]).unwrap();
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.input(input.clone());
        let y = bn.forward(&mut s, x).unwrap();
        // eps = 1e-5 keeps this within ~5e-6 relative
        assert!(s.graph.value(y).max_abs_diff(&input) < 2e-5);
    }
}
