//! Brute-force direct-loop baselines.
//!
//! These are deliberately naive nested loops, kept independent of the
//! im2col/GEMM paths in [`crate::tensor::kernels`]. The optimized kernels
//! must match them elementwise; the numeric test suites enforce that.

use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Direct cross-correlation: `x: n x cin x h x w`, `k: cout x cin x kh x kw`.
pub fn conv2d_direct<S: Scalar>(
    x: &TensorBase<S>,
    kernel: &TensorBase<S>,
    stride: usize,
    pad: usize,
) -> TensorBase<S> {
    let (n, cin, h, w) = dims4(x.shape());
    let (cout, kcin, kh, kw) = dims4(kernel.shape());
    assert_eq!(cin, kcin, "channel mismatch in direct conv");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![S::zero(); n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for c in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let iy = (oy * stride + p) as isize - pad as isize;
                                let ix = (ox * stride + q) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xs[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                let kv = ks[((o * cin + c) * kh + p) * kw + q];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    TensorBase::from_vec(vec![n, cout, oh, ow], out).expect("direct conv shape")
}

/// Direct transposed convolution by scatter-accumulate:
/// `z: n x cin x h x w`, `k: cin x cout x kh x kw` (input-channel major).
pub fn conv2d_transposed_direct<S: Scalar>(
    z: &TensorBase<S>,
    kernel: &TensorBase<S>,
    stride: usize,
    pad: usize,
) -> TensorBase<S> {
    let (n, cin, h, w) = dims4(z.shape());
    let (kcin, cout, kh, kw) = dims4(kernel.shape());
    assert_eq!(cin, kcin, "channel mismatch in direct transposed conv");
    let uh = (h - 1) * stride + kh - 2 * pad;
    let uw = (w - 1) * stride + kw - 2 * pad;
    let zs = z.data();
    let ks = kernel.data();
    let mut out = vec![S::zero(); n * cout * uh * uw];
    for b in 0..n {
        for c in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let zv = zs[((b * cin + c) * h + iy) * w + ix];
                    for o in 0..cout {
                        for p in 0..kh {
                            for q in 0..kw {
                                let uy = (iy * stride + p) as isize - pad as isize;
                                let ux = (ix * stride + q) as isize - pad as isize;
                                if uy < 0 || ux < 0 || uy >= uh as isize || ux >= uw as isize {
                                    continue;
                                }
                                let kv = ks[((c * cout + o) * kh + p) * kw + q];
                                out[((b * cout + o) * uh + uy as usize) * uw + ux as usize] =
                                    out[((b * cout + o) * uh + uy as usize) * uw + ux as usize]
                                        + zv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    TensorBase::from_vec(vec![n, cout, uh, uw], out).expect("direct transposed conv shape")
}

/// Direct window-max pooling.
pub fn maxpool2d_direct<S: Scalar>(
    x: &TensorBase<S>,
    win: usize,
    stride: usize,
) -> TensorBase<S> {
    let (n, c, h, w) = dims4(x.shape());
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let xs = x.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                for p in 0..win {
                    for q in 0..win {
                        let v = xs[plane * h * w + (oy * stride + p) * w + (ox * stride + q)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    TensorBase::from_vec(vec![n, c, oh, ow], out).expect("direct pool shape")
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}
