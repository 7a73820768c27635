// Inner loops shared by the graph ops. Every routine accumulates into its
// output buffer; callers zero it first when they want assignment.

use super::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<F: Scalar>(g: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if n >= LONG_DOT {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let c_row = &mut c[i * k..(i + 1) * k];
            for (p, cv) in c_row.iter_mut().enumerate() {
                *cv += dot(g_row, &b[p * n..(p + 1) * n]);
            }
        }
        return;
    }
    // short rows: transpose once so the inner loop runs along k
    let mut bt = vec![F::zero(); k * n];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_nn(g, &bt, c, m, n, k);
}

/// Below this inner length a dot product is dominated by its reduction.
const LONG_DOT: usize = 64;

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn<F: Scalar>(a: &[F], g: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            axpy(aip, g_row, &mut c[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    // Eight independent accumulators let the loop vectorise without
    // reassociating a single running sum.
    let mut acc = [F::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: F = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (xa, ya) in xc.zip(yc) {
        for lane in 0..8 {
            acc[lane] += xa[lane] * ya[lane];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a `(k_t × 1)` convolution over a `[B, C, T, V]` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub v: usize,
    pub k_t: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output-frame range `[lo, hi)` whose input frame for tap `j` is in bounds,
    /// plus the input offset of tap `j`.
    fn tap_range(&self, j: usize) -> (usize, usize, isize) {
        let off = (j * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let t_in = self.t_in as isize;
        // t_in_idx = t_o * s + off must lie in [0, t_in)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if t_in - 1 - off < 0 {
            0
        } else {
            ((t_in - 1 - off) / s + 1).min(self.t_out as isize)
        };
        let lo = lo.min(hi).max(0) as usize;
        (lo, hi.max(0) as usize, off)
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.t_out * self.v * self.cin_g() * self.k_t) as u64
    }
}

pub(crate) fn conv_forward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let (cin_g, cout_g, v) = (g.cin_g(), g.cout_g(), g.v);
    let in_plane = g.t_in * v;
    let out_plane = g.t_out * v;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            let o = &mut out[(b * g.c_out + co) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|e| *e = bias[co]);
            }
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xs = &x[(b * g.c_in + ci) * in_plane..][..in_plane];
                for j in 0..g.k_t {
                    let wv = w[(co * cin_g + cil) * g.k_t + j];
                    if wv == F::zero() {
                        continue;
                    }
                    let (lo, hi, off) = g.tap_range(j);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let src = (lo as isize + off) as usize * v;
                        axpy(wv, &xs[src..src + (hi - lo) * v], &mut o[lo * v..hi * v]);
                    } else {
                        for t_o in lo..hi {
                            let src = (t_o as isize * g.stride as isize + off) as usize * v;
                            axpy(wv, &xs[src..src + v], &mut o[t_o * v..(t_o + 1) * v]);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let (cin_g, cout_g, v) = (g.cin_g(), g.cout_g(), g.v);
    let in_plane = g.t_in * v;
    let out_plane = g.t_out * v;
    if let Some(db) = db {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let d = &dy[(b * g.c_out + co) * out_plane..][..out_plane];
                db[co] += d.iter().copied().sum::<F>();
            }
        }
    }
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            let d = &dy[(b * g.c_out + co) * out_plane..][..out_plane];
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xbase = (b * g.c_in + ci) * in_plane;
                for j in 0..g.k_t {
                    let widx = (co * cin_g + cil) * g.k_t + j;
                    let (lo, hi, off) = g.tap_range(j);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let src = xbase + (lo as isize + off) as usize * v;
                        let len = (hi - lo) * v;
                        let dslice = &d[lo * v..hi * v];
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += dot(dslice, &x[src..src + len]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            axpy(w[widx], dslice, &mut dx[src..src + len]);
                        }
                    } else {
                        for t_o in lo..hi {
                            let src =
                                xbase + (t_o as isize * g.stride as isize + off) as usize * v;
                            let dslice = &d[t_o * v..(t_o + 1) * v];
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[widx] += dot(dslice, &x[src..src + v]);
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                axpy(w[widx], dslice, &mut dx[src..src + v]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_products() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ recovers an [m,k] result
        let mut ct = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut ct, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((ct[i * k + p] - want).abs() < 1e-12);
            }
        }
        let mut tn = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut tn, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((tn[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tap_range_respects_padding_and_dilation() {
        let g = ConvGeom {
            batch: 1,
            c_in: 1,
            c_out: 1,
            t_in: 10,
            t_out: 10,
            v: 1,
            k_t: 5,
            stride: 1,
            dilation: 2,
            padding: 4,
            groups: 1,
        };
        // tap 0 reads t_o - 4, valid for t_o in [4, 10)
        assert_eq!(g.tap_range(0), (4, 10, -4));
        // tap 4 reads t_o + 4, valid for t_o in [0, 6)
        assert_eq!(g.tap_range(4), (0, 6, 4));
    }
}
