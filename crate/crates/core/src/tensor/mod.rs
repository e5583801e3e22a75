//! Dense n-dimensional tensors in row-major layout.
//!
//! Layout conventions, fixed once for the whole crate:
//! - activations are NCHW, convolution kernels are OIHW, transposed-conv
//!   kernels are IOHW (input-channel major);
//! - scalars are tensors of shape `[1]`;
//! - elementwise binary ops require equal shapes, or a right operand whose
//!   shape equals the left's shape without its leading (batch) dimension.
//!
//! Every forward operation verifies its output is finite; overflow is an
//! error, never a silent value.

pub mod kernels;

use std::sync::Arc;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense tensor: shape metadata over a contiguous row-major buffer.
///
/// The buffer is behind an `Arc`, so clones are cheap and frozen tensors can
/// be shared across threads; mutation copies on write.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Scan a freshly produced buffer for NaN/Inf.
pub(crate) fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(CoreError::NonFinite { op, index: i });
        }
    }
    Ok(())
}

impl<S: Scalar> TensorBase<S> {
    /// Build a tensor from a shape and matching buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::config(format!(
                "tensor shape must have positive dims, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(CoreError::config(format!(
                "shape {shape:?} implies {} elements, buffer holds {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); numel_of(shape)]),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel_of(shape)]),
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Self::full(&[1], v)
    }

    /// Zero-mean normal samples via Box-Muller; deterministic for a seeded rng.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = numel_of(shape);
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(S::cast(r * theta.cos() * std));
            if data.len() < n {
                data.push(S::cast(r * theta.sin() * std));
            }
        }
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = numel_of(shape);
        let data: Vec<S> = (0..n)
            .map(|_| S::cast(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// First element of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(CoreError::contract(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape (zero copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    fn unary_checked(&self, op: &'static str, f: impl Fn(S) -> S) -> Result<Self> {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        ensure_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary_checked("neg", |v| -v)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary_checked("exp", |v| v.exp())
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|v| *v <= S::zero()) {
            return Err(CoreError::Domain {
                op: "log",
                detail: format!("nonpositive input {} at flat index {i}", self.data[i]),
            });
        }
        self.unary_checked("log", |v| v.ln())
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary_checked("relu", |v| if v > S::zero() { v } else { S::zero() })
    }

    /// Numerically stable logistic function; never overflows.
    pub fn sigmoid(&self) -> Result<Self> {
        self.unary_checked("sigmoid", sigmoid_stable)
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary_checked("tanh", |v| v.tanh())
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        let k = S::cast(k);
        self.unary_checked("scale", |v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Self> {
        let k = S::cast(k);
        self.unary_checked("add_scalar", |v| v + k)
    }

    /// Broadcast plan for binary elementwise ops: equal shapes, or the right
    /// operand repeated along the left's leading batch dimension.
    fn broadcast_plan(&self, rhs: &Self, op: &'static str) -> Result<bool> {
        if self.shape == rhs.shape {
            Ok(false)
        } else if self.shape.len() > 1 && self.shape[1..] == rhs.shape[..] {
            Ok(true)
        } else {
            Err(CoreError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            })
        }
    }

    fn binary_checked(
        &self,
        rhs: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Self> {
        let broadcast = self.broadcast_plan(rhs, op)?;
        let mut data = Vec::with_capacity(self.numel());
        if broadcast {
            let chunk = rhs.numel();
            for lhs_chunk in self.data.chunks_exact(chunk) {
                data.extend(lhs_chunk.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)));
            }
        } else {
            data.extend(self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)));
        }
        ensure_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.binary_checked(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.binary_checked(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.binary_checked(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Self) -> Result<Self> {
        if let Some(i) = rhs.data.iter().position(|v| *v == S::zero()) {
            return Err(CoreError::Domain {
                op: "div",
                detail: format!("division by zero at flat index {i} of divisor"),
            });
        }
        self.binary_checked(rhs, "div", |a, b| a / b)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = as_2d(&self.shape, "matmul")?;
        let (k2, n) = as_2d(&rhs.shape, "matmul")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(m, k, n, &self.data, &rhs.data, &mut out);
        ensure_finite("matmul", &out)?;
        Ok(Self {
            shape: vec![m, n],
            data: Arc::new(out),
        })
    }

    pub fn sum(&self) -> Result<Self> {
        let s: S = self.data.iter().copied().sum();
        ensure_finite("sum", std::slice::from_ref(&s))?;
        Ok(Self::scalar(s))
    }

    pub fn mean(&self) -> Result<Self> {
        let s: S = self.data.iter().copied().sum();
        let m = s / S::cast(self.numel() as f64);
        ensure_finite("mean", std::slice::from_ref(&m))?;
        Ok(Self::scalar(m))
    }

    /// Global maximum; also returns the flat index of the first maximum in
    /// row-major order (the tie-break used for the backward pass).
    pub fn max(&self) -> Result<(Self, usize)> {
        let mut best = self.data[0];
        let mut arg = 0usize;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = i;
            }
        }
        Ok((Self::scalar(best), arg))
    }

    /// Row sums of a 2-D tensor: `[n, m] -> [n]`.
    pub fn row_sum(&self) -> Result<Self> {
        let (n, m) = as_2d(&self.shape, "row_sum")?;
        let data: Vec<S> = self.data.chunks_exact(m).map(|r| r.iter().copied().sum()).collect();
        ensure_finite("row_sum", &data)?;
        Self::from_vec(vec![n], data)
    }

    /// Row maxima of a 2-D tensor with first-maximum argmax per row.
    pub fn row_max(&self) -> Result<(Self, Vec<usize>)> {
        let (n, m) = as_2d(&self.shape, "row_max")?;
        let mut vals = Vec::with_capacity(n);
        let mut args = Vec::with_capacity(n);
        for row in self.data.chunks_exact(m) {
            let (arg, val) = row_argmax(row);
            vals.push(val);
            args.push(arg);
        }
        Ok((Self::from_vec(vec![n], vals)?, args))
    }

    /// Per-row maximum over columns excluding `excluded[row]`.
    pub fn row_max_excluding(&self, excluded: &[usize]) -> Result<(Self, Vec<usize>)> {
        let (n, m) = as_2d(&self.shape, "row_max_excluding")?;
        if excluded.len() != n {
            return Err(CoreError::contract(format!(
                "row_max_excluding: {n} rows but {} exclusions",
                excluded.len()
            )));
        }
        if m < 2 {
            return Err(CoreError::contract(
                "row_max_excluding requires at least 2 columns",
            ));
        }
        let mut vals = Vec::with_capacity(n);
        let mut args = Vec::with_capacity(n);
        for (row, &skip) in self.data.chunks_exact(m).zip(excluded) {
            if skip >= m {
                return Err(CoreError::contract(format!(
                    "excluded column {skip} out of range for {m} columns"
                )));
            }
            let mut arg = usize::MAX;
            let mut best = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if j != skip && v > best {
                    best = v;
                    arg = j;
                }
            }
            vals.push(best);
            args.push(arg);
        }
        Ok((Self::from_vec(vec![n], vals)?, args))
    }

    /// Select one column per row: `out[i] = self[i, index[i]]`.
    pub fn gather_class(&self, index: &[usize]) -> Result<Self> {
        let (n, m) = as_2d(&self.shape, "gather_class")?;
        if index.len() != n {
            return Err(CoreError::contract(format!(
                "gather_class: {n} rows but {} indices",
                index.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for (i, (row, &c)) in self.data.chunks_exact(m).zip(index).enumerate() {
            if c >= m {
                return Err(CoreError::contract(format!(
                    "label {c} out of range for {m} classes at row {i}"
                )));
            }
            data.push(row[c]);
        }
        Self::from_vec(vec![n], data)
    }

    /// Stable row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, m) = as_2d(&self.shape, "softmax")?;
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data.chunks_exact(m) {
            let (_, mx) = row_argmax(row);
            let exps: Vec<S> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: S = exps.iter().copied().sum();
            data.extend(exps.iter().map(|&e| e / z));
        }
        ensure_finite("softmax", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    /// Elementwise `max(v, lo)`.
    pub fn clamp_min(&self, lo: S) -> Result<Self> {
        self.unary_checked("clamp_min", |v| if v > lo { v } else { lo })
    }

    /// Clamp every element into `[lo, hi]` (used for pixel-space projection;
    /// not differentiated).
    pub fn clamp(&self, lo: S, hi: S) -> Self {
        let data: Vec<S> = self
            .data
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Zero-pad the two trailing spatial dims of an NCHW tensor.
    pub fn pad2d(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let (n, c, h, w) = as_4d(&self.shape, "pad2d")?;
        let (oh, ow) = (h + 2 * pad_h, w + 2 * pad_w);
        let mut data = vec![S::zero(); n * c * oh * ow];
        for img in 0..n * c {
            let src = &self.data[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * oh * ow..(img + 1) * oh * ow];
            for row in 0..h {
                let s = &src[row * w..(row + 1) * w];
                let off = (row + pad_h) * ow + pad_w;
                dst[off..off + w].copy_from_slice(s);
            }
        }
        Self::from_vec(vec![n, c, oh, ow], data)
    }

    /// Inverse of [`pad2d`]: crop `pad_h`/`pad_w` from each spatial border.
    pub fn crop2d(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let (n, c, h, w) = as_4d(&self.shape, "crop2d")?;
        if h <= 2 * pad_h || w <= 2 * pad_w {
            return Err(CoreError::config(format!(
                "crop2d: padding ({pad_h},{pad_w}) too large for {h}x{w}"
            )));
        }
        let (oh, ow) = (h - 2 * pad_h, w - 2 * pad_w);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for img in 0..n * c {
            let src = &self.data[img * h * w..(img + 1) * h * w];
            for row in 0..oh {
                let off = (row + pad_h) * w + pad_w;
                data.extend_from_slice(&src[off..off + ow]);
            }
        }
        Self::from_vec(vec![n, c, oh, ow], data)
    }

    /// Contiguous slice along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.is_empty() || start >= end || end > self.shape[0] {
            return Err(CoreError::contract(format!(
                "slice_rows {start}..{end} invalid for shape {:?}",
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * stride..end * stride].to_vec();
        Self::from_vec(shape, data)
    }

    /// Gather arbitrary rows along the leading dimension.
    pub fn take_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(CoreError::contract("take_rows on scalar"));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(CoreError::contract(format!(
                    "row index {i} out of range {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_vec(shape, data)
    }

    /// Predicted class per row of a 2-D logits tensor; ties break to the
    /// lowest class index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, m) = as_2d(&self.shape, "argmax_rows")?;
        Ok(self
            .data
            .chunks_exact(m)
            .map(|row| row_argmax(row).0)
            .collect())
    }

    /// Per-sample L-infinity distance to `other` along the leading dim.
    pub fn linf_per_row(&self, other: &Self) -> Result<Vec<f64>> {
        self.per_row_norm(other, |acc, d| acc.max(d.abs()), |acc, _| acc)
    }

    /// Per-sample L2 distance to `other` along the leading dim.
    pub fn l2_per_row(&self, other: &Self) -> Result<Vec<f64>> {
        self.per_row_norm(other, |acc, d| acc + d * d, |acc, _| acc.sqrt())
    }

    fn per_row_norm(
        &self,
        other: &Self,
        fold: impl Fn(f64, f64) -> f64,
        finish: impl Fn(f64, usize) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "per_row_norm",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let n = self.shape[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = &self.data[i * stride..(i + 1) * stride];
            let b = &other.data[i * stride..(i + 1) * stride];
            let acc = a
                .iter()
                .zip(b)
                .fold(0.0, |acc, (&x, &y)| fold(acc, (x - y).widen()));
            out.push(finish(acc, stride));
        }
        Ok(out)
    }
}

fn sigmoid_stable<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn as_2d(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(CoreError::Contract(format!("{op} expects a 2-D tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

pub(crate) fn as_4d(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(CoreError::Contract(format!("{op} expects an NCHW tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// First-maximum argmax of a row; ties break to the lowest index.
pub(crate) fn row_argmax<S: Scalar>(row: &[S]) -> (usize, S) {
    let mut arg = 0usize;
    let mut best = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            arg = j;
        }
    }
    (arg, best)
}
