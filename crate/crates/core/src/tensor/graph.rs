use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, dilation, zero padding and channel grouping of a temporal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Stride-1 convolution whose output length equals its input length.
    pub fn same(k_t: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: dilation * (k_t - 1) / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_len(&self, t: usize, k_t: usize) -> Option<usize> {
        let span = self.dilation * (k_t - 1) + 1;
        let padded = t + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance, the convention for running-statistic updates.
    pub var: Vec<F>,
}

#[derive(Clone, Copy, Debug)]
struct AxisGeom {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisGeom {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisGeom {
            outer: numel(&shape[..axis]),
            len: shape[axis],
            inner: numel(&shape[axis + 1..]),
        }
    }
}

#[derive(Clone, Debug)]
struct Bcast {
    shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

#[derive(Clone, Debug)]
struct MatmulGeom {
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    /// `b` is shared by every batch and `a` batches are contiguous, so the
    /// whole product is one `[batches·m, k] × [k, n]` GEMM.
    fused: bool,
}

enum Op<F> {
    Leaf,
    Add { a: Var, b: Var, bc: Option<Bcast> },
    Mul { a: Var, b: Var, bc: Option<Bcast> },
    Scale { a: Var, c: F },
    Sum { a: Var },
    Mean { a: Var, geom: AxisGeom },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Matmul { a: Var, b: Var, geom: MatmulGeom },
    Softmax { a: Var, geom: AxisGeom },
    LogSoftmax { a: Var, geom: AxisGeom },
    LayerNorm { x: Var, gain: Var, bias: Var, geom: AxisGeom, xhat: Vec<F>, rstd: Vec<F> },
    BatchNorm { x: Var, gain: Var, bias: Var, geom: AxisGeom, xhat: Vec<F>, rstd: Vec<F>, train: bool },
    Relu { a: Var },
    Gelu { a: Var },
    MaxPool { a: Var, argmax: Vec<usize> },
    Dropout { a: Var, mask: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// An append-only tape of tensor operations.
///
/// Nodes are only ever appended, so append order is a topological order and
/// [`Graph::backward`] walks it in reverse.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    macs: u64,
    track_kinks: bool,
    kink_hash: u64,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.get(v)?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

fn mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0000_0100_0000_01b3)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        s[d] = acc;
        acc *= shape[d];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d + a.len() >= nd { a[d + a.len() - nd] } else { 1 };
        let db = if d + b.len() >= nd { b[d + b.len() - nd] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` in the index space of the broadcast shape `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|d| {
            if d < lead || src[d - lead] == 1 {
                0
            } else {
                own[d - lead]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the output
/// offset and the offsets under strides `sa` and `sb`.
fn strided_for_each(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(&shape[..nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for i in 0..inner {
            f(o, base_a + i * ia, base_b + i * ib);
            o += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    half * x * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::of(0.5) * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::of(0.5)).exp() * F::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
            track_kinks: false,
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Records ReLU masks and max-pool winners so that callers can detect
    /// when a perturbation moved an input across a non-differentiable point.
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    /// Nominal multiply-accumulates performed by convolutions and matmuls so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) && !value.is_finite() {
            let inputs_finite = self.nodes.iter().all(|n| n.value.is_finite());
            assert!(!inputs_finite, "non-finite value produced from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// Inserts a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant leaf; no gradient reaches `a` through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        if sa_shape == sb_shape {
            let (x, y) = (self.data(a), self.data(b));
            let out: Vec<F> = if mul {
                x.iter().zip(y).map(|(&p, &q)| p * q).collect()
            } else {
                x.iter().zip(y).map(|(&p, &q)| p + q).collect()
            };
            let value = Tensor::new(sa_shape, out)?;
            let op = if mul {
                Op::Mul { a, b, bc: None }
            } else {
                Op::Add { a, b, bc: None }
            };
            return Ok(self.push(value, op, rg));
        }
        let shape = broadcast_shape(&sa_shape, &sb_shape).ok_or_else(|| {
            Error::dim(format!("cannot broadcast {sa_shape:?} with {sb_shape:?}"))
        })?;
        let bc = Bcast {
            sa: broadcast_strides(&sa_shape, &shape),
            sb: broadcast_strides(&sb_shape, &shape),
            shape,
        };
        let mut out = vec![F::zero(); numel(&bc.shape)];
        {
            let (x, y) = (self.data(a), self.data(b));
            strided_for_each(&bc.shape, &bc.sa, &bc.sb, |o, i, j| {
                out[o] = if mul { x[i] * y[j] } else { x[i] + y[j] };
            });
        }
        let value = Tensor::new(bc.shape.clone(), out)?;
        let op = if mul {
            Op::Mul { a, b, bc: Some(bc) }
        } else {
            Op::Add { a, b, bc: Some(bc) }
        };
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with NumPy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -F::one());
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// Sum of all elements as a zero-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!("mean over axis {axis} of {shape:?}")));
        }
        let geom = AxisGeom::of(&shape, axis);
        let x = self.data(a);
        let inv = F::one() / F::of(geom.len as f64);
        let mut out = vec![F::zero(); geom.outer * geom.inner];
        for o in 0..geom.outer {
            for l in 0..geom.len {
                let src = &x[(o * geom.len + l) * geom.inner..][..geom.inner];
                let dst = &mut out[o * geom.inner..][..geom.inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean { a, geom }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Materialising axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let strides = row_major_strides(&shape);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let zeros = vec![0; shape.len()];
        let x = self.data(a);
        let mut out = vec![F::zero(); x.len()];
        strided_for_each(&oshape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat of no tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} of {first:?}")));
        }
        let mut oshape = first.clone();
        oshape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::dim(format!("concat of {first:?} with {s:?} on axis {axis}")));
            }
            oshape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let row: usize = chunks.iter().sum();
        let mut out = vec![F::zero(); outer * row];
        for o in 0..outer {
            let mut at = o * row;
            for (&p, &c) in parts.iter().zip(&chunks) {
                out[at..at + c].copy_from_slice(&self.data(p)[o * c..(o + 1) * c]);
                at += c;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// `(k_t × 1)` convolution of `x[B, C_in, T, V]` with `w[C_out, C_in/groups, k_t, 1]`.
    pub fn conv_tv(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv_tv expects 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        if ws[3] != 1 {
            return Err(Error::dim(format!("conv_tv supports k_v = 1 only, got weight {ws:?}")));
        }
        let (batch, c_in, t_in, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k_t) = (ws[0], ws[2]);
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::config(format!(
                "groups = {} must divide C_in = {c_in} and C_out = {c_out}",
                spec.groups
            )));
        }
        if ws[1] != c_in / spec.groups {
            return Err(Error::dim(format!(
                "weight {ws:?} expects {} input channels per group, input has {c_in} over {} groups",
                ws[1], spec.groups
            )));
        }
        if spec.stride == 0 || spec.dilation == 0 || k_t == 0 {
            return Err(Error::config("stride, dilation and kernel size must be positive"));
        }
        let t_out = spec
            .output_len(t_in, k_t)
            .ok_or_else(|| Error::dim(format!("kernel span exceeds padded length {t_in}")))?;
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(format!("bias {:?} for {c_out} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            t_in,
            t_out,
            v,
            k_t,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            groups: spec.groups,
        };
        let mut out = vec![F::zero(); batch * c_out * t_out * v];
        kernels::conv_forward(&geom, self.data(x), self.data(w), bias.map(|b| self.data(b)), &mut out);
        self.macs += geom.macs();
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, c_out, t_out, v], out)?;
        Ok(self.push(value, Op::Conv { x, w, b: bias, geom }, rg))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]` with broadcast leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs ≥2-d operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions differ: {sa:?} × {sb:?}")));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let lead = broadcast_shape(la, lb)
            .ok_or_else(|| Error::dim(format!("matmul batch dims {la:?} vs {lb:?} do not broadcast")))?;
        let nb = numel(&lead);
        let (stra, strb) = (broadcast_strides(la, &lead), broadcast_strides(lb, &lead));
        let mut a_batch = vec![0; nb];
        let mut b_batch = vec![0; nb];
        strided_for_each(&lead, &stra, &strb, |o, i, j| {
            a_batch[o] = i;
            b_batch[o] = j;
        });
        let fused = b_batch.iter().all(|&j| j == 0) && a_batch.iter().enumerate().all(|(o, &i)| o == i);
        let geom = MatmulGeom {
            m,
            k,
            n,
            a_batch,
            b_batch,
            fused,
        };
        let mut out = vec![F::zero(); nb * m * n];
        {
            let (x, y) = (self.data(a), self.data(b));
            if geom.fused {
                kernels::gemm_nn(x, &y[..k * n], &mut out, nb * m, k, n);
            } else {
                for bi in 0..nb {
                    let xa = &x[geom.a_batch[bi] * m * k..][..m * k];
                    let yb = &y[geom.b_batch[bi] * k * n..][..k * n];
                    kernels::gemm_nn(xa, yb, &mut out[bi * m * n..][..m * n], m, k, n);
                }
            }
        }
        self.macs += (nb * m * k * n) as u64;
        let mut oshape = lead;
        oshape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Matmul { a, b, geom }, rg))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<AxisGeom> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(AxisGeom::of(shape, axis))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let geom = self.check_axis(a, axis)?;
        let out = softmax_along(self.data(a), geom, false);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a, geom }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let geom = self.check_axis(a, axis)?;
        let out = softmax_along(self.data(a), geom, true);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { a, geom }, rg))
    }

    /// Layer normalisation along `axis` with per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let geom = self.check_axis(x, axis)?;
        if self.shape(gain) != [geom.len] || self.shape(bias) != [geom.len] {
            return Err(Error::dim(format!(
                "layer_norm over {} channels with gain {:?} and bias {:?}",
                geom.len,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let count = geom.outer * geom.inner;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); count];
        let mut out = vec![F::zero(); xd.len()];
        let inv_len = F::one() / F::of(geom.len as f64);
        for o in 0..geom.outer {
            for i in 0..geom.inner {
                let at = |l: usize| (o * geom.len + l) * geom.inner + i;
                let mean = (0..geom.len).map(|l| xd[at(l)]).sum::<F>() * inv_len;
                let var = (0..geom.len)
                    .map(|l| {
                        let d = xd[at(l)] - mean;
                        d * d
                    })
                    .sum::<F>()
                    * inv_len;
                let r = F::one() / (var + F::of(eps)).sqrt();
                rstd[o * geom.inner + i] = r;
                for l in 0..geom.len {
                    let h = (xd[at(l)] - mean) * r;
                    xhat[at(l)] = h;
                    out[at(l)] = h * g[l] + b[l];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                geom,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Batch normalisation of `x[B, C, ...]` per channel.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given running mean and variance are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<F>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm input {shape:?} has no channel axis")));
        }
        let geom = AxisGeom::of(&shape, 1);
        if self.shape(gain) != [geom.len] || self.shape(bias) != [geom.len] {
            return Err(Error::dim(format!("batch_norm gain/bias for {} channels", geom.len)));
        }
        let count = geom.outer * geom.inner;
        let train = running.is_none();
        if train && count < 2 {
            return Err(Error::dim(format!(
                "training-mode batch_norm needs at least 2 values per channel, got {count}"
            )));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); geom.len];
        let mut stats = BatchNormStats {
            mean: vec![F::zero(); geom.len],
            var: vec![F::zero(); geom.len],
        };
        for c in 0..geom.len {
            let (mean, var) = match running {
                None => {
                    let mut s = F::zero();
                    for o in 0..geom.outer {
                        s += xd[(o * geom.len + c) * geom.inner..][..geom.inner].iter().copied().sum::<F>();
                    }
                    let mean = s / F::of(count as f64);
                    let mut ss = F::zero();
                    for o in 0..geom.outer {
                        for &v in &xd[(o * geom.len + c) * geom.inner..][..geom.inner] {
                            ss += (v - mean) * (v - mean);
                        }
                    }
                    stats.mean[c] = mean;
                    stats.var[c] = ss / F::of((count - 1) as f64);
                    (mean, ss / F::of(count as f64))
                }
                Some((rm, rv)) => (rm[c], rv[c]),
            };
            let r = F::one() / (var + F::of(eps)).sqrt();
            rstd[c] = r;
            for o in 0..geom.outer {
                let base = (o * geom.len + c) * geom.inner;
                for i in base..base + geom.inner {
                    let h = (xd[i] - mean) * r;
                    xhat[i] = h;
                    out[i] = h * g[c] + b[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                geom,
                xhat,
                rstd,
                train,
            },
            rg,
        );
        Ok((v, train.then_some(stats)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.data(a);
        if self.track_kinks {
            let mut h = self.kink_hash;
            for chunk in x.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > F::zero()) as u64) << i));
                h = mix(h, bits);
            }
            self.kink_hash = h;
        }
        let x = self.data(a);
        let out = x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Stride-1 max pooling over the temporal axis of `[B, C, T, V]` with an
    /// odd window; out-of-range frames are ignored.
    pub fn max_pool_t(&mut self, a: Var, window: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || window % 2 == 0 {
            return Err(Error::dim(format!("max_pool_t needs 4-d input and odd window, got {shape:?}, {window}")));
        }
        let (planes, t, v) = (shape[0] * shape[1], shape[2], shape[3]);
        let half = window / 2;
        let x = self.data(a);
        let mut out = vec![F::zero(); x.len()];
        let mut argmax = vec![0usize; x.len()];
        for p in 0..planes {
            for ti in 0..t {
                let lo = ti.saturating_sub(half);
                let hi = (ti + half).min(t - 1);
                for vi in 0..v {
                    let mut best = (p * t + lo) * v + vi;
                    for tj in lo + 1..=hi {
                        let idx = (p * t + tj) * v + vi;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = (p * t + ti) * v + vi;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        if self.track_kinks {
            let mut h = self.kink_hash;
            for &i in &argmax {
                h = mix(h, i as u64);
            }
            self.kink_hash = h;
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaxPool { a, argmax }, rg))
    }

    /// Inverted dropout. `p == 0` returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns the gradient of every node that requires one. The graph is not
    /// consumed, so calling this twice yields identical gradients; accumulation
    /// across passes is the caller's business.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].take() else { continue };
            self.backprop_node(node, &g, lower);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], lower: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn slot<'a, F: Scalar>(lower: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut [F] {
            lower[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bc } | Op::Mul { a, b, bc } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                let (va, vb) = (self.data(*a), self.data(*b));
                for (target, other, is_a) in [(*a, vb, true), (*b, va, false)] {
                    if !wants(target) {
                        continue;
                    }
                    let dst = slot(lower, nodes, target);
                    match bc {
                        None => {
                            if is_mul {
                                for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
                                    *d += gv * o;
                                }
                            } else {
                                for (d, &gv) in dst.iter_mut().zip(g) {
                                    *d += gv;
                                }
                            }
                        }
                        Some(bc) => {
                            let (st, so) = if is_a { (&bc.sa, &bc.sb) } else { (&bc.sb, &bc.sa) };
                            strided_for_each(&bc.shape, st, so, |o, it, io| {
                                dst[it] += if is_mul { g[o] * other[io] } else { g[o] };
                            });
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    let dst = slot(lower, nodes, *a);
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let dst = slot(lower, nodes, *a);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a, geom } => {
                if wants(*a) {
                    let inv = F::one() / F::of(geom.len as f64);
                    let dst = slot(lower, nodes, *a);
                    for o in 0..geom.outer {
                        let src = &g[o * geom.inner..][..geom.inner];
                        for l in 0..geom.len {
                            let d = &mut dst[(o * geom.len + l) * geom.inner..][..geom.inner];
                            for (dv, &sv) in d.iter_mut().zip(src) {
                                *dv += sv * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let dst = slot(lower, nodes, *a);
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Permute { a, perm } => {
                if wants(*a) {
                    let shape = self.shape(*a);
                    let strides = row_major_strides(shape);
                    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
                    let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                    let zeros = vec![0; shape.len()];
                    let dst = slot(lower, nodes, *a);
                    strided_for_each(&oshape, &src, &zeros, |o, i, _| dst[i] += g[o]);
                }
            }
            Op::Concat { parts, outer, chunks } => {
                let row: usize = chunks.iter().sum();
                let mut at = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if wants(p) {
                        let dst = slot(lower, nodes, p);
                        for o in 0..*outer {
                            let src = &g[o * row + at..][..c];
                            for (d, &s) in dst[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    at += c;
                }
            }
            Op::Conv { x, w, b, geom } => {
                let mut dx = wants(*x).then(|| lower[x.0].take().unwrap_or_else(|| vec![F::zero(); self.value(*x).numel()]));
                let mut dw = wants(*w).then(|| lower[w.0].take().unwrap_or_else(|| vec![F::zero(); self.value(*w).numel()]));
                let mut db = b
                    .filter(|&b| wants(b))
                    .map(|b| lower[b.0].take().unwrap_or_else(|| vec![F::zero(); self.value(b).numel()]));
                kernels::conv_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    lower[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    lower[w.0] = Some(dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    lower[b.0] = Some(db);
                }
            }
            Op::Matmul { a, b, geom } => {
                let (m, k, n) = (geom.m, geom.k, geom.n);
                let nb = geom.a_batch.len();
                if wants(*a) {
                    let bv = self.data(*b);
                    let dst = slot(lower, nodes, *a);
                    if geom.fused {
                        kernels::gemm_nt(g, &bv[..k * n], dst, nb * m, k, n);
                    } else {
                        for bi in 0..nb {
                            let gb = &g[bi * m * n..][..m * n];
                            let yb = &bv[geom.b_batch[bi] * k * n..][..k * n];
                            kernels::gemm_nt(gb, yb, &mut dst[geom.a_batch[bi] * m * k..][..m * k], m, k, n);
                        }
                    }
                }
                if wants(*b) {
                    let av = self.data(*a);
                    let dst = slot(lower, nodes, *b);
                    if geom.fused {
                        kernels::gemm_tn(av, g, &mut dst[..k * n], nb * m, k, n);
                    } else {
                        for bi in 0..nb {
                            let gb = &g[bi * m * n..][..m * n];
                            let xa = &av[geom.a_batch[bi] * m * k..][..m * k];
                            kernels::gemm_tn(xa, gb, &mut dst[geom.b_batch[bi] * k * n..][..k * n], m, k, n);
                        }
                    }
                }
            }
            Op::Softmax { a, geom } => {
                if wants(*a) {
                    let y = node.value.data();
                    let dst = slot(lower, nodes, *a);
                    for o in 0..geom.outer {
                        for i in 0..geom.inner {
                            let at = |l: usize| (o * geom.len + l) * geom.inner + i;
                            let s: F = (0..geom.len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..geom.len {
                                dst[at(l)] += y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a, geom } => {
                if wants(*a) {
                    let y = node.value.data();
                    let dst = slot(lower, nodes, *a);
                    for o in 0..geom.outer {
                        for i in 0..geom.inner {
                            let at = |l: usize| (o * geom.len + l) * geom.inner + i;
                            let s: F = (0..geom.len).map(|l| g[at(l)]).sum();
                            for l in 0..geom.len {
                                dst[at(l)] += g[at(l)] - y[at(l)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, geom, xhat, rstd } => {
                let gv = self.data(*gain);
                if wants(*gain) {
                    let dst = slot(lower, nodes, *gain);
                    for o in 0..geom.outer {
                        for l in 0..geom.len {
                            let base = (o * geom.len + l) * geom.inner;
                            for i in base..base + geom.inner {
                                dst[l] += g[i] * xhat[i];
                            }
                        }
                    }
                }
                if wants(*bias) {
                    let dst = slot(lower, nodes, *bias);
                    for o in 0..geom.outer {
                        for l in 0..geom.len {
                            let base = (o * geom.len + l) * geom.inner;
                            dst[l] += g[base..base + geom.inner].iter().copied().sum::<F>();
                        }
                    }
                }
                if wants(*x) {
                    let dst = slot(lower, nodes, *x);
                    let nlen = F::of(geom.len as f64);
                    for o in 0..geom.outer {
                        for i in 0..geom.inner {
                            let at = |l: usize| (o * geom.len + l) * geom.inner + i;
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for l in 0..geom.len {
                                let dh = g[at(l)] * gv[l];
                                s1 += dh;
                                s2 += dh * xhat[at(l)];
                            }
                            let r = rstd[o * geom.inner + i] / nlen;
                            for l in 0..geom.len {
                                let dh = g[at(l)] * gv[l];
                                dst[at(l)] += r * (nlen * dh - s1 - xhat[at(l)] * s2);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, geom, xhat, rstd, train } => {
                let gv = self.data(*gain);
                let mut sum_g = vec![F::zero(); geom.len];
                let mut sum_gx = vec![F::zero(); geom.len];
                for o in 0..geom.outer {
                    for c in 0..geom.len {
                        let base = (o * geom.len + c) * geom.inner;
                        for i in base..base + geom.inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(*gain) {
                    let dst = slot(lower, nodes, *gain);
                    for c in 0..geom.len {
                        dst[c] += sum_gx[c];
                    }
                }
                if wants(*bias) {
                    let dst = slot(lower, nodes, *bias);
                    for c in 0..geom.len {
                        dst[c] += sum_g[c];
                    }
                }
                if wants(*x) {
                    let dst = slot(lower, nodes, *x);
                    let cnt = F::of((geom.outer * geom.inner) as f64);
                    for o in 0..geom.outer {
                        for c in 0..geom.len {
                            let base = (o * geom.len + c) * geom.inner;
                            let scale = gv[c] * rstd[c];
                            for i in base..base + geom.inner {
                                if *train {
                                    dst[i] += scale / cnt * (cnt * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                                } else {
                                    dst[i] += scale * g[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let y = node.value.data();
                    let dst = slot(lower, nodes, *a);
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        if yv > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let x = self.data(*a);
                    let dst = slot(lower, nodes, *a);
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::MaxPool { a, argmax } => {
                if wants(*a) {
                    let dst = slot(lower, nodes, *a);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dst[src] += gv;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let dst = slot(lower, nodes, *a);
                    for ((d, &gv), &m) in dst.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
        }
    }
}

fn softmax_along<F: Scalar>(x: &[F], geom: AxisGeom, log: bool) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for o in 0..geom.outer {
        for i in 0..geom.inner {
            let at = |l: usize| (o * geom.len + l) * geom.inner + i;
            let mx = (0..geom.len).map(|l| x[at(l)]).fold(F::neg_infinity(), F::max);
            let z: F = (0..geom.len).map(|l| (x[at(l)] - mx).exp()).sum();
            if log {
                let lz = z.ln();
                for l in 0..geom.len {
                    out[at(l)] = x[at(l)] - mx - lz;
                }
            } else {
                for l in 0..geom.len {
                    out[at(l)] = (x[at(l)] - mx).exp() / z;
                }
            }
        }
    }
    out
}
