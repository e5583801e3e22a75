//! Optimized CPU kernels behind the tensor ops.
//!
//! Convolutions are lowered to im2col + GEMM. All parallel loops use fixed
//! chunk sizes and ordered reductions so results are bitwise reproducible
//! regardless of thread scheduling.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Samples per parallel work unit. Fixed so the floating-point reduction
/// order never depends on the thread count.
const SAMPLE_CHUNK: usize = 8;

/// K-dimension block for the axpy GEMM; keeps the active C row in L1.
const KBLOCK: usize = 128;

/// Minimum FLOP count before a GEMM bothers with threads.
const PAR_FLOPS: usize = 1 << 20;

/// `c += a @ b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if 2 * m * k * n >= PAR_FLOPS && m > 4 {
        c.par_chunks_mut(4 * n)
            .zip(a.par_chunks(4 * k))
            .for_each(|(c_rows, a_rows)| gemm_rows(k, n, a_rows, b, c_rows));
    } else {
        for (c_rows, a_rows) in c.chunks_mut(4 * n).zip(a.chunks(4 * k)) {
            gemm_rows(k, n, a_rows, b, c_rows);
        }
    }
}

/// Up to four C rows per call; the 4-row kernel reuses each B row across
/// four accumulator streams.
fn gemm_rows<S: Scalar>(k: usize, n: usize, a_rows: &[S], b: &[S], c_rows: &mut [S]) {
    let rows = c_rows.len() / n;
    if rows == 4 {
        let (c0, rest) = c_rows.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let mut p0 = 0;
        while p0 < k {
            let p1 = (p0 + KBLOCK).min(k);
            for p in p0..p1 {
                let a0 = a_rows[p];
                let a1 = a_rows[k + p];
                let a2 = a_rows[2 * k + p];
                let a3 = a_rows[3 * k + p];
                let b_row = &b[p * n..p * n + n];
                for j in 0..n {
                    let bv = b_row[j];
                    c0[j] = a0.mul_add(bv, c0[j]);
                    c1[j] = a1.mul_add(bv, c1[j]);
                    c2[j] = a2.mul_add(bv, c2[j]);
                    c3[j] = a3.mul_add(bv, c3[j]);
                }
            }
            p0 = p1;
        }
    } else {
        for (c_row, a_row) in c_rows.chunks_exact_mut(n).zip(a_rows.chunks_exact(k)) {
            gemm_row(k, n, a_row, b, c_row);
        }
    }
}

#[inline]
fn gemm_row<S: Scalar>(k: usize, n: usize, a_row: &[S], b: &[S], c_row: &mut [S]) {
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + KBLOCK).min(k);
        for p in p0..p1 {
            let av = a_row[p];
            let b_row = &b[p * n..p * n + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = av.mul_add(bv, *cv);
            }
        }
        p0 = p1;
    }
}

/// `c += a @ b^T` for `a: m x k`, `b: n x k`, `c: m x n` (dot-product form).
pub fn gemm_abt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(a_row, b_row);
        }
    }
}

/// `c += a^T @ b` for `a: k x m`, `b: k x n`, `c: m x n` (axpy form).
pub fn gemm_atb<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        let a_col = &a[p * m..(p + 1) * m];
        for (i, &av) in a_col.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// Dot product with eight independent accumulators, combined in a fixed
/// order (vectorizes without reassociating the reduction arbitrarily).
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ka, kb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] = ka[l].mul_add(kb[l], acc[l]);
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in rem_a.iter().zip(rem_b) {
        tail = x.mul_add(y, tail);
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// Geometry of one convolution, shared by the forward and both backward
/// kernels. `cin`/`h`/`w` describe the conv input, `oh`/`ow` its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Dims for a direct convolution of an `n x cin x h x w` input.
    pub fn conv(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(CoreError::config("conv stride must be positive"));
        }
        let oh = out_dim(h, kh, stride, pad)?;
        let ow = out_dim(w, kw, stride, pad)?;
        Ok(ConvDims { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow })
    }

    /// Dims of the conv whose input-gradient pass realizes a transposed
    /// convolution of an `n x cin_t x h_t x w_t` input. The transposed conv
    /// output size is `(in - 1) * stride - 2 * pad + k`.
    pub fn transposed(
        n: usize,
        cin_t: usize,
        h_t: usize,
        w_t: usize,
        cout_t: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(CoreError::config("transposed conv stride must be positive"));
        }
        let uh = ((h_t - 1) * stride + kh).checked_sub(2 * pad);
        let uw = ((w_t - 1) * stride + kw).checked_sub(2 * pad);
        let (uh, uw) = match (uh, uw) {
            (Some(uh), Some(uw)) if uh > 0 && uw > 0 => (uh, uw),
            _ => {
                return Err(CoreError::config(format!(
                    "transposed conv of {h_t}x{w_t} with k={kh}x{kw} stride={stride} pad={pad} \
                     has nonpositive output dims"
                )))
            }
        };
        // Forward of the transposed conv == input-gradient of this conv.
        Ok(ConvDims {
            n,
            cin: cout_t,
            h: uh,
            w: uw,
            cout: cin_t,
            kh,
            kw,
            stride,
            pad,
            oh: h_t,
            ow: w_t,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(CoreError::config(format!(
            "conv kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfold one sample's patches into `col: (cin*kh*kw) x (oh*ow)`.
/// `col` must be zeroed by the caller (padding cells stay zero).
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let ohw = d.out_plane();
    for c in 0..d.cin {
        let plane = &x[c * d.in_plane()..(c + 1) * d.in_plane()];
        for p in 0..d.kh {
            for q in 0..d.kw {
                let row = (c * d.kh * d.kw + p * d.kw + q) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + p) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // valid ox range: 0 <= ox*stride + q - pad < w
                    let (ox0, ox1) = valid_range(d.ow, d.stride, q, d.pad, d.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let dst = &mut col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    if d.stride == 1 {
                        // stride-1 ranges are contiguous
                        let src_start = ox0 + q - d.pad;
                        dst[ox0..ox1]
                            .copy_from_slice(&plane[iy * d.w + src_start..iy * d.w + src_start + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            let ix = ox * d.stride + q - d.pad;
                            dst[ox] = plane[iy * d.w + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto one sample's input layout.
fn col2im_add<S: Scalar>(col: &[S], d: &ConvDims, x: &mut [S]) {
    let ohw = d.out_plane();
    for c in 0..d.cin {
        let plane = &mut x[c * d.in_plane()..(c + 1) * d.in_plane()];
        for p in 0..d.kh {
            for q in 0..d.kw {
                let row = (c * d.kh * d.kw + p * d.kw + q) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + p) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let (ox0, ox1) = valid_range(d.ow, d.stride, q, d.pad, d.w);
                    let src = &col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    for ox in ox0..ox1 {
                        let ix = ox * d.stride + q - d.pad;
                        plane[iy * d.w + ix] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output columns `[ox0, ox1)` whose input column `ox*stride + q - pad`
/// lands inside `[0, w)`.
#[inline]
fn valid_range(ow: usize, stride: usize, q: usize, pad: usize, w: usize) -> (usize, usize) {
    let ox0 = if q >= pad { 0 } else { (pad - q + stride - 1) / stride };
    // ox*stride + q - pad <= w-1  =>  ox <= (w-1+pad-q)/stride
    let upper = w as isize - 1 + pad as isize - q as isize;
    if upper < 0 {
        return (0, 0);
    }
    let ox1 = ((upper as usize) / stride + 1).min(ow);
    (ox0.min(ox1), ox1)
}

/// Batched conv forward: `x: n x cin x h x w`, `kernel: cout x cin x kh x kw`
/// (already contiguous as a `cout x (cin*kh*kw)` matrix) -> `n x cout x oh x ow`.
pub fn conv2d_fwd<S: Scalar>(x: &[S], kernel: &[S], d: &ConvDims) -> Vec<S> {
    let in_sz = d.cin * d.in_plane();
    let out_sz = d.cout * d.out_plane();
    let mut out = vec![S::zero(); d.n * out_sz];
    let ckk = d.ckk();
    out.par_chunks_mut(SAMPLE_CHUNK * out_sz)
        .zip(x.par_chunks(SAMPLE_CHUNK * in_sz))
        .for_each(|(out_chunk, x_chunk)| {
            let mut col = vec![S::zero(); ckk * d.out_plane()];
            for (o, xs) in out_chunk.chunks_mut(out_sz).zip(x_chunk.chunks(in_sz)) {
                col.iter_mut().for_each(|v| *v = S::zero());
                im2col(xs, d, &mut col);
                gemm(d.cout, ckk, d.out_plane(), kernel, &col, o);
            }
        });
    out
}

/// Gradient w.r.t. the conv input; also the forward pass of the transposed
/// convolution (`dy` plays the transposed conv's input role).
pub fn conv2d_bwd_input<S: Scalar>(dy: &[S], kernel: &[S], d: &ConvDims) -> Vec<S> {
    let in_sz = d.cin * d.in_plane();
    let out_sz = d.cout * d.out_plane();
    let mut dx = vec![S::zero(); d.n * in_sz];
    let ckk = d.ckk();
    dx.par_chunks_mut(SAMPLE_CHUNK * in_sz)
        .zip(dy.par_chunks(SAMPLE_CHUNK * out_sz))
        .for_each(|(dx_chunk, dy_chunk)| {
            let mut col = vec![S::zero(); ckk * d.out_plane()];
            for (dxs, dys) in dx_chunk.chunks_mut(in_sz).zip(dy_chunk.chunks(out_sz)) {
                col.iter_mut().for_each(|v| *v = S::zero());
                gemm_atb(ckk, d.cout, d.out_plane(), kernel, dys, &mut col);
                col2im_add(&col, d, dxs);
            }
        });
    dx
}

/// Gradient w.r.t. the conv kernel, accumulated over the batch in fixed
/// chunk order.
pub fn conv2d_bwd_kernel<S: Scalar>(x: &[S], dy: &[S], d: &ConvDims) -> Vec<S> {
    let in_sz = d.cin * d.in_plane();
    let out_sz = d.cout * d.out_plane();
    let ckk = d.ckk();
    let partials: Vec<Vec<S>> = x
        .par_chunks(SAMPLE_CHUNK * in_sz)
        .zip(dy.par_chunks(SAMPLE_CHUNK * out_sz))
        .map(|(x_chunk, dy_chunk)| {
            let mut dk = vec![S::zero(); d.cout * ckk];
            let mut col = vec![S::zero(); ckk * d.out_plane()];
            for (xs, dys) in x_chunk.chunks(in_sz).zip(dy_chunk.chunks(out_sz)) {
                col.iter_mut().for_each(|v| *v = S::zero());
                im2col(xs, d, &mut col);
                gemm_abt(d.cout, d.out_plane(), ckk, dys, &col, &mut dk);
            }
            dk
        })
        .collect();
    let mut dk = vec![S::zero(); d.cout * ckk];
    for partial in partials {
        for (acc, v) in dk.iter_mut().zip(partial) {
            *acc += v;
        }
    }
    dk
}

/// Max-pool geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolDims {
    pub fn new(n: usize, c: usize, h: usize, w: usize, win: usize, stride: usize) -> Result<Self> {
        if win == 0 || stride == 0 {
            return Err(CoreError::config("pool window and stride must be positive"));
        }
        if win > h || win > w {
            return Err(CoreError::config(format!(
                "pool window {win} larger than input {h}x{w}"
            )));
        }
        Ok(PoolDims {
            n,
            c,
            h,
            w,
            win,
            stride,
            oh: (h - win) / stride + 1,
            ow: (w - win) / stride + 1,
        })
    }
}

/// Window maxima with the argmax recorded as a flat index into the input
/// buffer; ties go to the first element in row-major order.
pub fn maxpool_fwd<S: Scalar>(x: &[S], d: &PoolDims) -> (Vec<S>, Vec<u32>) {
    let planes = d.n * d.c;
    let out_len = planes * d.oh * d.ow;
    let mut out = vec![S::zero(); out_len];
    let mut arg = vec![0u32; out_len];
    for plane in 0..planes {
        let src = &x[plane * d.h * d.w..(plane + 1) * d.h * d.w];
        let base = plane * d.h * d.w;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for p in 0..d.win {
                    let iy = oy * d.stride + p;
                    for q in 0..d.win {
                        let ix = ox * d.stride + q;
                        let v = src[iy * d.w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * d.w + ix;
                        }
                    }
                }
                let o = plane * d.oh * d.ow + oy * d.ow + ox;
                out[o] = best;
                arg[o] = (base + best_idx) as u32;
            }
        }
    }
    (out, arg)
}

/// Route each output gradient to its window's argmax element.
pub fn maxpool_bwd<S: Scalar>(dy: &[S], arg: &[u32], input_len: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); input_len];
    for (&g, &a) in dy.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}
