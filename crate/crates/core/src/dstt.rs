//! Disentangled spatiotemporal transformer block.
//!
//! The input is split into a wide spatial stream (1×1 conv, `C_s` channels)
//! and a narrow temporal stream (3×1 conv, `C_t` channels). Spatial tokens
//! attend over joints within a frame, temporal tokens over frames within a
//! joint. The streams are concatenated back to `C_e = C_s + C_t` and mixed by
//! a channel-wise feed-forward with a depthwise temporal conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Init, LayerNorm, Linear, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{ConvSpec, Scalar, Tensor, Var};

/// Standard deviation of the joint-type embedding at initialisation.
pub const JOINT_EMBED_STD: f64 = 0.02;

/// Base of the sinusoidal frame encoding.
pub const SINUSOID_BASE: f64 = 10_000.0;

/// Kernel length of the temporal disentangling conv and the CwFF depthwise conv.
const LOCAL_KERNEL: usize = 3;

/// Head count for a stream of `width` channels when `wanted` does not divide it.
pub fn largest_divisor_at_most(width: usize, wanted: usize) -> usize {
    (1..=wanted.max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsttConfig {
    pub c_e: usize,
    /// Fraction of `c_e` given to the temporal stream.
    pub alpha: f64,
    pub s_heads: usize,
    pub t_heads: usize,
    pub gamma: usize,
    pub attn_drop: f64,
    pub ff_drop: f64,
    pub use_joint_type: bool,
    pub use_frame_order: bool,
}

impl Default for DsttConfig {
    fn default() -> Self {
        DsttConfig {
            c_e: 128,
            alpha: 0.25,
            s_heads: 6,
            t_heads: 8,
            gamma: 3,
            attn_drop: 0.0,
            ff_drop: 0.0,
            use_joint_type: true,
            use_frame_order: true,
        }
    }
}

impl DsttConfig {
    /// Temporal width `α·C_e`; `None` unless it is a whole number.
    fn temporal_width(&self) -> Option<usize> {
        let w = self.alpha * self.c_e as f64;
        let r = w.round();
        ((w - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
    }

    /// Lowers each head count to the largest divisor of its stream width not
    /// above `s_wanted` / `t_wanted`. Widths that are not integral are left
    /// for `validate` to report.
    pub fn fit_heads(&mut self, s_wanted: usize, t_wanted: usize) {
        if let Some(c_t) = self.temporal_width().filter(|&c| c < self.c_e) {
            self.s_heads = largest_divisor_at_most(self.c_e - c_t, s_wanted);
            self.t_heads = largest_divisor_at_most(c_t, t_wanted);
        }
    }

    pub fn c_t(&self) -> usize {
        self.temporal_width().expect("validated config")
    }

    pub fn c_s(&self) -> usize {
        self.c_e - self.c_t()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        let c_t = self.temporal_width().ok_or_else(|| {
            Error::config(format!("alpha {} · C_e {} is not a positive integer", self.alpha, self.c_e))
        })?;
        if c_t >= self.c_e {
            return Err(Error::config("temporal stream leaves no spatial channels"));
        }
        let c_s = self.c_e - c_t;
        if self.s_heads == 0 || c_s % self.s_heads != 0 {
            return Err(Error::config(format!("s_heads {} does not divide C_e^S = {c_s}", self.s_heads)));
        }
        if self.t_heads == 0 || c_t % self.t_heads != 0 {
            return Err(Error::config(format!("t_heads {} does not divide C_e^T = {c_t}", self.t_heads)));
        }
        if self.gamma == 0 {
            return Err(Error::config("gamma must be at least 1"));
        }
        for (name, p) in [("attn_drop", self.attn_drop), ("ff_drop", self.ff_drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Learnable scalars of one block with `c_in` input channels. The
    /// joint-type table is counted only for the first stage.
    pub fn param_count(&self, c_in: usize, v: usize, first_stage: bool) -> usize {
        let (c_e, c_s, c_t) = (self.c_e, self.c_s(), self.c_t());
        let hidden = self.gamma * c_e;
        let disentangle = Conv::param_count(c_in, c_s, 1, 1, true) + Conv::param_count(c_in, c_t, LOCAL_KERNEL, 1, true);
        let embed = if first_stage { v * c_s } else { 0 };
        let attn = |c: usize| 2 * c + Mhsa::param_count(c);
        let cwff = 2 * c_e
            + Conv::param_count(c_e, hidden, 1, 1, true)
            + Conv::param_count(hidden, hidden, LOCAL_KERNEL, hidden, true)
            + Conv::param_count(hidden, c_e, 1, 1, true);
        disentangle + embed + attn(c_s) + attn(c_t) + cwff
    }

    /// Multiply-accumulates for one sample over `t × v`.
    pub fn macs(&self, c_in: usize, t: usize, v: usize) -> u64 {
        let (c_e, c_s, c_t) = (self.c_e, self.c_s(), self.c_t());
        let tv = (t * v) as u64;
        let hidden = self.gamma * c_e;
        let disentangle = (c_in * c_s + c_in * c_t * LOCAL_KERNEL) as u64 * tv;
        let gsa = Mhsa::macs(t, v, c_s);
        let gta = Mhsa::macs(v, t, c_t);
        let cwff = (2 * c_e * hidden + hidden * LOCAL_KERNEL) as u64 * tv;
        disentangle + gsa + gta + cwff
    }
}

/// Multi-head scaled dot-product self-attention over `[R, L, C]` tokens.
///
/// The key projection has no bias: under the row softmax a key bias only
/// shifts every score in a row by the same amount.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Mhsa {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {width}")));
        }
        let mut lin = |n: &str, bias: bool| Linear::new(store, rng, &format!("{name}.{n}"), width, width, bias, Init::XavierUniform);
        Ok(Mhsa {
            query: lin("query", true)?,
            key: lin("key", false)?,
            value: lin("value", true)?,
            out: lin("out", true)?,
            heads,
            width,
        })
    }

    pub fn param_count(width: usize) -> usize {
        4 * width * width + 3 * width
    }

    /// MACs for `rows` independent sequences of length `len`.
    pub fn macs(rows: usize, len: usize, width: usize) -> u64 {
        let proj = 4 * rows * len * width * width;
        let attend = 2 * rows * len * len * width;
        (proj + attend) as u64
    }

    /// Returns the output and the attention weights `[R, H, L, L]`.
    pub fn forward_with_weights<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var, attn_drop: f64) -> Result<(Var, Var)> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::dim(format!("attention of width {} got tokens {shape:?}", self.width)));
        }
        let (r, l, h) = (shape[0], shape[1], self.heads);
        let d = self.width / h;
        let split = |s: &mut Session<'_, F>, v: Var, perm: &[usize]| -> Result<Var> {
            let v = s.graph.reshape(v, &[r, l, h, d])?;
            s.graph.permute(v, perm)
        };
        let q = self.query.forward(s, x)?;
        let q = split(s, q, &[0, 2, 1, 3])?;
        let k = self.key.forward(s, x)?;
        let kt = split(s, k, &[0, 2, 3, 1])?;
        let v = self.value.forward(s, x)?;
        let v = split(s, v, &[0, 2, 1, 3])?;
        let scores = s.graph.matmul(q, kt)?;
        let scores = s.graph.scale(scores, F::of(1.0 / (d as f64).sqrt()));
        let weights = s.graph.softmax(scores, 3)?;
        let dropped = s.dropout(weights, attn_drop)?;
        let ctx = s.graph.matmul(dropped, v)?;
        let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.graph.reshape(ctx, &[r, l, self.width])?;
        Ok((self.out.forward(s, ctx)?, weights))
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var, attn_drop: f64) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, attn_drop)?.0)
    }
}

/// `[B, C, T, V] → [B·T, V, C]`.
pub fn joint_tokens<F: Scalar>(s: &mut Session<'_, F>, f: Var) -> Result<Var> {
    let [b, c, t, v] = dims4(s, f)?;
    let p = s.graph.permute(f, &[0, 2, 3, 1])?;
    s.graph.reshape(p, &[b * t, v, c])
}

/// Inverse of [`joint_tokens`].
pub fn from_joint_tokens<F: Scalar>(s: &mut Session<'_, F>, tokens: Var, b: usize, t: usize) -> Result<Var> {
    let sh = s.graph.shape(tokens).to_vec();
    let r = s.graph.reshape(tokens, &[b, t, sh[1], sh[2]])?;
    s.graph.permute(r, &[0, 3, 1, 2])
}

/// `[B, C, T, V] → [B·V, T, C]`.
pub fn frame_tokens<F: Scalar>(s: &mut Session<'_, F>, f: Var) -> Result<Var> {
    let [b, c, t, v] = dims4(s, f)?;
    let p = s.graph.permute(f, &[0, 3, 2, 1])?;
    s.graph.reshape(p, &[b * v, t, c])
}

/// Inverse of [`frame_tokens`].
pub fn from_frame_tokens<F: Scalar>(s: &mut Session<'_, F>, tokens: Var, b: usize, v: usize) -> Result<Var> {
    let sh = s.graph.shape(tokens).to_vec();
    let r = s.graph.reshape(tokens, &[b, v, sh[1], sh[2]])?;
    s.graph.permute(r, &[0, 3, 2, 1])
}

fn dims4<F: Scalar>(s: &Session<'_, F>, f: Var) -> Result<[usize; 4]> {
    let sh = s.graph.shape(f);
    sh.try_into()
        .map_err(|_| Error::dim(format!("expected [B, C, T, V], got {sh:?}")))
}

/// `PE[t, 2i] = sin(t / base^(2i/dim))`, `PE[t, 2i+1] = cos(t / base^(2i/dim))`, shape `[frames, dim]`.
pub fn sinusoidal_encoding(frames: usize, dim: usize) -> Tensor<f64> {
    Tensor::from_fn([frames, dim], |i| {
        let (t, j) = (i[0] as f64, i[1]);
        let angle = t / SINUSOID_BASE.powf((j - j % 2) as f64 / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Layer norm over channels, `1×1` expand by `γ`, GELU, depthwise `3×1`,
/// GELU, `1×1` squeeze.
#[derive(Clone, Debug)]
pub struct Cwff {
    pub norm: LayerNorm,
    pub expand: Conv,
    pub depthwise: Conv,
    pub squeeze: Conv,
}

impl Cwff {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, c_e: usize, gamma: usize) -> Result<Self> {
        let hidden = gamma * c_e;
        Ok(Cwff {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c_e)?,
            expand: Conv::new(store, rng, &format!("{name}.expand"), c_e, hidden, 1, ConvSpec::default(), true, Init::KaimingNormal)?,
            depthwise: Conv::new(
                store,
                rng,
                &format!("{name}.depthwise"),
                hidden,
                hidden,
                LOCAL_KERNEL,
                ConvSpec::same(LOCAL_KERNEL, 1).with_groups(hidden),
                true,
                Init::KaimingNormal,
            )?,
            squeeze: Conv::new(store, rng, &format!("{name}.squeeze"), hidden, c_e, 1, ConvSpec::default(), true, Init::KaimingNormal)?,
        })
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, x: Var, ff_drop: f64) -> Result<Var> {
        let y = self.norm.forward(s, x, 1)?;
        let y = self.expand.forward(s, y)?;
        let y = s.graph.gelu(y);
        let y = self.depthwise.forward(s, y)?;
        let y = s.graph.gelu(y);
        let y = self.squeeze.forward(s, y)?;
        s.dropout(y, ff_drop)
    }
}

/// Intermediate tensors of one block, kept for feature dumps.
#[derive(Clone, Copy, Debug)]
pub struct DsttTrace {
    pub spatial: Var,
    pub temporal: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct DsttBlock {
    pub spatial_embed: Conv,
    pub temporal_embed: Conv,
    /// Joint-type table `[V, C_s]`, allocated only for the first stage.
    pub joint_type: Option<ParamId>,
    pub first_stage: bool,
    pub s_norm: LayerNorm,
    pub gsa: Mhsa,
    pub t_norm: LayerNorm,
    pub gta: Mhsa,
    pub cwff: Cwff,
    pub config: DsttConfig,
}

impl DsttBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &DsttConfig,
        c_in: usize,
        v: usize,
        first_stage: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c_s, c_t) = (cfg.c_s(), cfg.c_t());
        let spatial_embed = Conv::new(store, rng, &format!("{name}.embed_s"), c_in, c_s, 1, ConvSpec::default(), true, Init::KaimingNormal)?;
        let temporal_embed = Conv::new(
            store,
            rng,
            &format!("{name}.embed_t"),
            c_in,
            c_t,
            LOCAL_KERNEL,
            ConvSpec::same(LOCAL_KERNEL, 1),
            true,
            Init::KaimingNormal,
        )?;
        let joint_type = if first_stage {
            let table = Tensor::randn([v, c_s], JOINT_EMBED_STD, rng);
            Some(store.register(format!("{name}.joint_type"), ParamKind::Embedding, table)?)
        } else {
            None
        };
        Ok(DsttBlock {
            spatial_embed,
            temporal_embed,
            joint_type,
            first_stage,
            s_norm: LayerNorm::new(store, &format!("{name}.gsa_norm"), c_s)?,
            gsa: Mhsa::new(store, rng, &format!("{name}.gsa"), c_s, cfg.s_heads)?,
            t_norm: LayerNorm::new(store, &format!("{name}.gta_norm"), c_t)?,
            gta: Mhsa::new(store, rng, &format!("{name}.gta"), c_t, cfg.t_heads)?,
            cwff: Cwff::new(store, rng, &format!("{name}.cwff"), cfg.c_e, cfg.gamma)?,
            config: cfg.clone(),
        })
    }

    /// Spatial and temporal streams before positional encoding.
    pub fn disentangle<F: Scalar>(&self, s: &mut Session<'_, F>, f: Var) -> Result<(Var, Var)> {
        let fs = self.spatial_embed.forward(s, f)?;
        let ft = self.temporal_embed.forward(s, f)?;
        Ok((fs, ft))
    }

    /// Adds the joint-type table and the frame encoding on the first stage.
    pub fn positional_encode<F: Scalar>(&self, s: &mut Session<'_, F>, fs: Var, ft: Var) -> Result<(Var, Var)> {
        if !self.first_stage {
            return Ok((fs, ft));
        }
        let [_, c_s, _, v] = dims4(s, fs)?;
        let fs = match self.joint_type {
            Some(id) if self.config.use_joint_type => {
                let table = s.param(id);
                let table = s.graph.permute(table, &[1, 0])?;
                let table = s.graph.reshape(table, &[c_s, 1, v])?;
                s.graph.add(fs, table)?
            }
            _ => fs,
        };
        let ft = if self.config.use_frame_order {
            let [_, c_t, t, _] = dims4(s, ft)?;
            let pe = sinusoidal_encoding(t, c_t);
            let pe = Tensor::from_fn([c_t, t, 1], |i| F::of(pe.at(&[i[1], i[0]])));
            let pe = s.input(pe);
            s.graph.add(ft, pe)?
        } else {
            ft
        };
        Ok((fs, ft))
    }

    /// Global spatial attention with pre-norm and residual, in `[B, C_s, T, V]`.
    pub fn spatial_attention<F: Scalar>(&self, s: &mut Session<'_, F>, fs: Var) -> Result<Var> {
        let [b, _, t, _] = dims4(s, fs)?;
        let tok = joint_tokens(s, fs)?;
        let n = self.s_norm.forward(s, tok, 2)?;
        let a = self.gsa.forward(s, n, self.config.attn_drop)?;
        let a = s.graph.add(tok, a)?;
        from_joint_tokens(s, a, b, t)
    }

    /// Global temporal attention with pre-norm and residual, in `[B, C_t, T, V]`.
    pub fn temporal_attention<F: Scalar>(&self, s: &mut Session<'_, F>, ft: Var) -> Result<Var> {
        let [b, _, _, v] = dims4(s, ft)?;
        let tok = frame_tokens(s, ft)?;
        let n = self.t_norm.forward(s, tok, 2)?;
        let a = self.gta.forward(s, n, self.config.attn_drop)?;
        let a = s.graph.add(tok, a)?;
        from_frame_tokens(s, a, b, v)
    }

    pub fn forward_traced<F: Scalar>(&self, s: &mut Session<'_, F>, f: Var) -> Result<DsttTrace> {
        let (fs, ft) = self.disentangle(s, f)?;
        let (fs, ft) = self.positional_encode(s, fs, ft)?;
        let a_s = self.spatial_attention(s, fs)?;
        let a_t = self.temporal_attention(s, ft)?;
        let y = s.graph.concat(&[a_s, a_t], 1)?;
        let mixed = self.cwff.forward(s, y, self.config.ff_drop)?;
        let output = s.graph.add(y, mixed)?;
        Ok(DsttTrace {
            spatial: fs,
            temporal: ft,
            output,
        })
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, F>, f: Var) -> Result<Var> {
        Ok(self.forward_traced(s, f)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_widths() {
        let c = DsttConfig::default();
        c.validate().unwrap();
        assert_eq!((c.c_s(), c.c_t()), (96, 32));
        let half = DsttConfig { alpha: 0.5, ..c.clone() };
        assert_eq!((half.c_s(), half.c_t()), (64, 64));
        let bad = DsttConfig { s_heads: 5, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sinusoid_values() {
        let pe = sinusoidal_encoding(2, 8);
        for j in 0..8 {
            assert_eq!(pe.at(&[0, j]), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-12);
        // pair 1 uses 10000^(2/8) = 10
        assert!((pe.at(&[1, 2]) - (0.1f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn token_layouts_round_trip() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Eval, 0);
        let t = Tensor::from_fn([2, 3, 4, 5], |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let x = s.input(t.clone());
        let jt = joint_tokens(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(jt), &[8, 5, 3]);
        // row b·T + t, token v, channel c
        assert_eq!(s.graph.value(jt).at(&[1 * 4 + 2, 3, 1]), t.at(&[1, 1, 2, 3]));
        let back = from_joint_tokens(&mut s, jt, 2, 4).unwrap();
        assert_eq!(s.graph.value(back), &t);
        let ft = frame_tokens(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(ft), &[10, 4, 3]);
        assert_eq!(s.graph.value(ft).at(&[1 * 5 + 3, 2, 1]), t.at(&[1, 1, 2, 3]));
        let back = from_frame_tokens(&mut s, ft, 2, 5).unwrap();
        assert_eq!(s.graph.value(back), &t);
    }

    #[test]
    fn block_output_width_is_c_e() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DsttConfig { c_e: 16, s_heads: 3, t_heads: 2, gamma: 2, ..DsttConfig::default() };
        let blk = DsttBlock::new(&mut store, &mut rng, "d", &cfg, 5, 4, true).unwrap();
        assert_eq!(store.learnable_count(), cfg.param_count(5, 4, true));
        let mut s = Session::new(&store, Mode::Train, 0);
        let x = s.input(Tensor::randn([2, 5, 6, 4], 1.0, &mut rng));
        let y = blk.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 16, 6, 4]);
        assert_eq!(s.graph.macs(), 2 * cfg.macs(5, 6, 4));
    }
}
