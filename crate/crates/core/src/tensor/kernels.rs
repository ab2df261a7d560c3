//! Raw slice kernels behind the tape operations.
//!
//! All matrices are row-major. The `gemm_*` functions accumulate into
//! `c`, so callers zero the output when they want a plain product.

use super::Scalar;
use crate::par::{self, Exec};

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const LANES: usize = 8;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [T::zero(); LANES];
            let (ah, at) = arow.split_at(k - k % LANES);
            let (bh, bt) = brow.split_at(k - k % LANES);
            for (xa, xb) in ah.chunks_exact(LANES).zip(bh.chunks_exact(LANES)) {
                for l in 0..LANES {
                    lanes[l] += xa[l] * xb[l];
                }
            }
            let mut acc = lanes.iter().copied().sum::<T>();
            for (&x, &y) in at.iter().zip(bt) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }
}

/// Output columns `[lo, hi)` whose input column `o·stride + k − pad` lies
/// inside `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample into `[patch × ho·wo]` columns.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut cols = Vec::with_capacity(g.patch() * ho * wo);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, wo, kx, g.stride, g.pad);
                cols.resize(cols.len() + ylo * wo, T::zero());
                for oy in ylo..yhi {
                    let row = &plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    cols.resize(cols.len() + xlo, T::zero());
                    let start = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        cols.extend_from_slice(&row[start..start + xhi - xlo]);
                    } else {
                        cols.extend(row[start..].iter().step_by(g.stride).take(xhi - xlo));
                    }
                    cols.resize(cols.len() + wo - xhi, T::zero());
                }
                cols.resize(cols.len() + (ho - yhi) * wo, T::zero());
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, wo, kx, g.stride, g.pad);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                for oy in ylo..yhi {
                    let row = &mut plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let start = xlo * g.stride + kx - g.pad;
                    let s = &src[oy * wo + xlo..oy * wo + xhi];
                    if g.stride == 1 {
                        for (d, &v) in row[start..start + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in row[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation, NCHW input, `[cout×cin×kh×kw]` kernel.
pub fn conv2d_forward<T: Scalar>(
    exec: Exec,
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); batch * g.out_len()];
    par::for_each_chunk(exec, &mut out, g.out_len(), |s, o| {
        let cols = im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()]);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        gemm_nn(g.cout, g.patch(), hw, k, &cols, o);
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `gout`.
pub fn conv2d_backward<T: Scalar>(
    exec: Exec,
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    gout: &[T],
    want_dx: bool,
    want_dk: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let hw = g.out_h() * g.out_w();
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); batch * g.in_len()];
        par::for_each_chunk(exec, &mut dx, g.in_len(), |s, d| {
            let go = &gout[s * g.out_len()..(s + 1) * g.out_len()];
            let mut cols = vec![T::zero(); g.patch() * hw];
            gemm_tn(g.patch(), g.cout, hw, k, go, &mut cols);
            col2im(g, &cols, d);
        });
        dx
    });
    let dk = want_dk.then(|| {
        // Per-sample partials summed in sample order keep the result
        // independent of the execution strategy.
        let partials = par::map_range(exec, batch, |s| {
            let go = &gout[s * g.out_len()..(s + 1) * g.out_len()];
            let cols = im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()]);
            let mut dk = vec![T::zero(); g.cout * g.patch()];
            gemm_nt(g.cout, hw, g.patch(), go, &cols, &mut dk);
            dk
        });
        let mut dk = vec![T::zero(); g.cout * g.patch()];
        for p in partials {
            for (a, b) in dk.iter_mut().zip(p) {
                *a += b;
            }
        }
        dk
    });
    let db = want_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..batch {
            for (co, d) in db.iter_mut().enumerate() {
                let off = s * g.out_len() + co * hw;
                *d += gout[off..off + hw].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dk, db }
}

/// Nearest-neighbour ×2 upsampling of `planes` independent `h×w` planes.
pub fn upsample2<T: Scalar>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(planes: usize, h: usize, w: usize, g: &[T]) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
            }
        }
    }
    out
}

/// Softmax along the middle axis of an `[outer × len × inner]` view.
pub fn softmax_axis<T: Scalar>(outer: usize, len: usize, inner: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    out
}
