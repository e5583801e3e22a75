//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`TapeBase`] records every operation of a forward pass (define-by-run);
//! [`TapeBase::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products. Gradients are available for any recorded node,
//! in particular for *input* leaves — every attack differentiates with
//! respect to fresh inputs, not just parameters.
//!
//! A tape is single-owner while recording (it is not `Sync`); parallel
//! attack generation gives each worker its own tape over shared frozen
//! parameters.

use std::cell::RefCell;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvDims, PoolDims};
use crate::tensor::{ensure_finite, TensorBase};

/// Gradient record for one recorded operation.
#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// Identity forward that blocks gradient flow.
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, S),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Max { input: usize, arg: usize },
    RowSum(usize),
    RowMax { input: usize, args: Vec<usize> },
    RowMaxExcluding { input: usize, args: Vec<usize> },
    GatherClass { input: usize, index: Vec<usize> },
    ClampMin { input: usize, lo: S },
    Reshape(usize),
    Pad2d { input: usize, ph: usize, pw: usize },
    SliceRows { input: usize, start: usize },
    Conv2d { input: usize, kernel: usize, dims: ConvDims },
    ConvTransposed2d { input: usize, kernel: usize, dims: ConvDims },
    MaxPool2d { input: usize, arg: Vec<u32>, input_len: usize },
    BiasNchw { input: usize, bias: usize },
    Softmax(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, inv_temp: S, probs: TensorBase<S> },
    Mse { pred: usize, target: usize },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: TensorBase<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Append-only operation record. Node inputs always precede the node, so a
/// single reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct TapeBase<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Debug)]
pub struct Var<'t, S: Scalar> {
    tape: &'t TapeBase<S>,
    id: usize,
}

impl<S: Scalar> Copy for Var<'_, S> {}
impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<TensorBase<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the swept loss w.r.t. `var`, if `var` was on a
    /// differentiable path.
    pub fn get(&self, var: Var<'_, S>) -> Option<&TensorBase<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but a contract error when absent.
    pub fn expect(&self, var: Var<'_, S>) -> Result<&TensorBase<S>> {
        self.get(var)
            .ok_or_else(|| CoreError::contract(format!("no gradient recorded for node {}", var.id)))
    }
}

impl<S: Scalar> TapeBase<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes; outstanding `Var`s become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: TensorBase<S>, requires_grad: bool, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Record an input leaf.
    pub fn leaf(&self, value: TensorBase<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a constant (no gradient).
    pub fn constant(&self, value: TensorBase<S>) -> Var<'_, S> {
        self.push(value, false, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> TensorBase<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. The tape is left intact (gradients
    /// are reset per sweep), so several roots can be swept from one forward
    /// record; call [`clear`](Self::clear) to reset the tape itself.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(CoreError::contract("loss var belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<TensorBase<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(TensorBase::ones(&[1]));

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().expect("checked above");
            self.propagate(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(
        &self,
        nodes: &[Node<S>],
        id: usize,
        g: &TensorBase<S>,
        grads: &mut Vec<Option<TensorBase<S>>>,
    ) -> Result<()> {
        let value = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum_reduced(nodes, grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum_reduced(nodes, grads, *b, g.neg()?)?;
            }
            Op::Mul(a, b) => {
                if self.requires_id(nodes, *a) {
                    let vb = &nodes[*b].value;
                    self.accum(grads, *a, g.mul(vb)?)?;
                }
                if self.requires_id(nodes, *b) {
                    let va = &nodes[*a].value;
                    self.accum_reduced(nodes, grads, *b, g.mul(va)?)?;
                }
            }
            Op::Div(a, b) => {
                let vb = &nodes[*b].value;
                if self.requires_id(nodes, *a) {
                    self.accum(grads, *a, g.div(vb)?)?;
                }
                if self.requires_id(nodes, *b) {
                    // d(a/b)/db = -a / b^2
                    let va = &nodes[*a].value;
                    let d = g.mul(va)?.div(&vb.mul(vb)?)?.neg()?;
                    self.accum_reduced(nodes, grads, *b, d)?;
                }
            }
            Op::MatMul(a, b) => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires_id(nodes, *a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::gemm_abt(m, n, k, g.data(), vb.data(), &mut da);
                    self.accum(grads, *a, TensorBase::from_vec(vec![m, k], da)?)?;
                }
                if self.requires_id(nodes, *b) {
                    let mut db = vec![S::zero(); k * n];
                    kernels::gemm_atb(k, m, n, va.data(), g.data(), &mut db);
                    self.accum(grads, *b, TensorBase::from_vec(vec![k, n], db)?)?;
                }
            }
            Op::Neg(a) => self.accum(grads, *a, g.neg()?)?,
            Op::Exp(a) => self.accum(grads, *a, g.mul(value)?)?,
            Op::Log(a) => {
                let va = &nodes[*a].value;
                self.accum(grads, *a, g.div(va)?)?;
            }
            Op::Relu(a) => {
                let va = &nodes[*a].value;
                let d: Vec<S> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accum(grads, *a, TensorBase::from_vec(va.shape().to_vec(), d)?)?;
            }
            Op::Sigmoid(a) => {
                let d: Vec<S> = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                    .collect();
                self.accum(grads, *a, TensorBase::from_vec(value.shape().to_vec(), d)?)?;
            }
            Op::Tanh(a) => {
                let d: Vec<S> = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                self.accum(grads, *a, TensorBase::from_vec(value.shape().to_vec(), d)?)?;
            }
            Op::Scale(a, k) => self.accum(grads, *a, g.scale(k.widen())?)?,
            Op::AddScalar(a) => self.accum(grads, *a, g.clone())?,
            Op::Sum(a) => {
                let va = &nodes[*a].value;
                self.accum(grads, *a, TensorBase::full(va.shape(), g.item()?))?;
            }
            Op::Mean(a) => {
                let va = &nodes[*a].value;
                let gv = g.item()? / S::cast(va.numel() as f64);
                self.accum(grads, *a, TensorBase::full(va.shape(), gv))?;
            }
            Op::Max { input, arg } => {
                let va = &nodes[*input].value;
                let mut d = TensorBase::zeros(va.shape());
                d.data_mut()[*arg] = g.item()?;
                self.accum(grads, *input, d)?;
            }
            Op::RowSum(a) => {
                let va = &nodes[*a].value;
                let m = va.shape()[1];
                let mut d = vec![S::zero(); va.numel()];
                for (row, &gv) in d.chunks_exact_mut(m).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v = gv);
                }
                self.accum(grads, *a, TensorBase::from_vec(va.shape().to_vec(), d)?)?;
            }
            Op::RowMax { input, args } | Op::RowMaxExcluding { input, args } => {
                let va = &nodes[*input].value;
                let m = va.shape()[1];
                let mut d = TensorBase::zeros(va.shape());
                let dd = d.data_mut();
                for (i, (&arg, &gv)) in args.iter().zip(g.data()).enumerate() {
                    dd[i * m + arg] += gv;
                }
                self.accum(grads, *input, d)?;
            }
            Op::GatherClass { input, index } => {
                let va = &nodes[*input].value;
                let m = va.shape()[1];
                let mut d = TensorBase::zeros(va.shape());
                let dd = d.data_mut();
                for (i, (&c, &gv)) in index.iter().zip(g.data()).enumerate() {
                    dd[i * m + c] += gv;
                }
                self.accum(grads, *input, d)?;
            }
            Op::ClampMin { input, lo } => {
                let va = &nodes[*input].value;
                let d: Vec<S> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &xv)| if xv > *lo { gv } else { S::zero() })
                    .collect();
                self.accum(grads, *input, TensorBase::from_vec(va.shape().to_vec(), d)?)?;
            }
            Op::Reshape(a) => {
                let va = &nodes[*a].value;
                self.accum(grads, *a, g.reshape(va.shape())?)?;
            }
            Op::Pad2d { input, ph, pw } => {
                self.accum(grads, *input, g.crop2d(*ph, *pw)?)?;
            }
            Op::SliceRows { input, start } => {
                let va = &nodes[*input].value;
                let stride: usize = va.shape()[1..].iter().product();
                let mut d = TensorBase::zeros(va.shape());
                let off = start * stride;
                d.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                self.accum(grads, *input, d)?;
            }
            Op::Conv2d { input, kernel, dims } => {
                if self.requires_id(nodes, *input) {
                    let dx = kernels::conv2d_bwd_input(g.data(), nodes[*kernel].value.data(), dims);
                    let shape = nodes[*input].value.shape().to_vec();
                    self.accum(grads, *input, TensorBase::from_vec(shape, dx)?)?;
                }
                if self.requires_id(nodes, *kernel) {
                    let dk =
                        kernels::conv2d_bwd_kernel(nodes[*input].value.data(), g.data(), dims);
                    let shape = nodes[*kernel].value.shape().to_vec();
                    self.accum(grads, *kernel, TensorBase::from_vec(shape, dk)?)?;
                }
            }
            Op::ConvTransposed2d { input, kernel, dims } => {
                if self.requires_id(nodes, *input) {
                    let dz = kernels::conv2d_fwd(g.data(), nodes[*kernel].value.data(), dims);
                    let shape = nodes[*input].value.shape().to_vec();
                    self.accum(grads, *input, TensorBase::from_vec(shape, dz)?)?;
                }
                if self.requires_id(nodes, *kernel) {
                    let dk =
                        kernels::conv2d_bwd_kernel(g.data(), nodes[*input].value.data(), dims);
                    let shape = nodes[*kernel].value.shape().to_vec();
                    self.accum(grads, *kernel, TensorBase::from_vec(shape, dk)?)?;
                }
            }
            Op::MaxPool2d { input, arg, input_len } => {
                let dx = kernels::maxpool_bwd(g.data(), arg, *input_len);
                let shape = nodes[*input].value.shape().to_vec();
                self.accum(grads, *input, TensorBase::from_vec(shape, dx)?)?;
            }
            Op::BiasNchw { input, bias } => {
                self.accum(grads, *input, g.clone())?;
                if self.requires_id(nodes, *bias) {
                    let [_, c, h, w] = [
                        value.shape()[0],
                        value.shape()[1],
                        value.shape()[2],
                        value.shape()[3],
                    ];
                    let mut db = vec![S::zero(); c];
                    for img in g.data().chunks_exact(c * h * w) {
                        for (ch, dbch) in img.chunks_exact(h * w).zip(db.iter_mut()) {
                            *dbch += ch.iter().copied().sum();
                        }
                    }
                    self.accum(grads, *bias, TensorBase::from_vec(vec![c], db)?)?;
                }
            }
            Op::Softmax(a) => {
                // ds = y * (g - sum_j g_j y_j) per row
                let y = value;
                let m = y.shape()[1];
                let mut d = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks_exact(m).zip(g.data().chunks_exact(m)) {
                    let inner: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
                }
                self.accum(grads, *a, TensorBase::from_vec(y.shape().to_vec(), d)?)?;
            }
            Op::CrossEntropy { logits, labels, inv_temp, probs } => {
                let n = labels.len();
                let m = probs.shape()[1];
                let scale = g.item()? * *inv_temp / S::cast(n as f64);
                let mut d = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * m + y] -= S::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accum(grads, *logits, TensorBase::from_vec(probs.shape().to_vec(), d)?)?;
            }
            Op::Mse { pred, target } => {
                let vp = &nodes[*pred].value;
                let vt = &nodes[*target].value;
                let scale = g.item()? * S::cast(2.0 / vp.numel() as f64);
                let diff: Vec<S> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                if self.requires_id(nodes, *pred) {
                    self.accum(
                        grads,
                        *pred,
                        TensorBase::from_vec(vp.shape().to_vec(), diff.clone())?,
                    )?;
                }
                if self.requires_id(nodes, *target) {
                    let neg: Vec<S> = diff.iter().map(|&v| -v).collect();
                    self.accum(grads, *target, TensorBase::from_vec(vt.shape().to_vec(), neg)?)?;
                }
            }
        }
        Ok(())
    }

    fn requires_id(&self, nodes: &[Node<S>], id: usize) -> bool {
        nodes[id].requires_grad
    }

    fn accum(
        &self,
        grads: &mut [Option<TensorBase<S>>],
        id: usize,
        delta: TensorBase<S>,
    ) -> Result<()> {
        match &mut grads[id] {
            Some(existing) => {
                let sum = existing.add(&delta)?;
                *existing = sum;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Accumulate into `id`, reducing over the leading batch dimension when
    /// the forward op broadcast that operand.
    fn accum_reduced(
        &self,
        nodes: &[Node<S>],
        grads: &mut [Option<TensorBase<S>>],
        id: usize,
        delta: TensorBase<S>,
    ) -> Result<()> {
        if !nodes[id].requires_grad {
            return Ok(());
        }
        let target_shape = nodes[id].value.shape().to_vec();
        if delta.shape() == target_shape.as_slice() {
            return self.accum(grads, id, delta);
        }
        // broadcast case: delta [n, rest..] -> target [rest..]
        let chunk: usize = target_shape.iter().product();
        let mut red = vec![S::zero(); chunk];
        for part in delta.data().chunks_exact(chunk) {
            for (r, &v) in red.iter_mut().zip(part) {
                *r += v;
            }
        }
        self.accum(grads, id, TensorBase::from_vec(target_shape, red)?)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Cheap clone of the recorded value (shared buffer).
    pub fn value(&self) -> TensorBase<S> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(
        &self,
        out: TensorBase<S>,
        op: impl FnOnce(usize) -> Op<S>,
    ) -> Var<'t, S> {
        self.tape.push(out, self.tape.requires(self.id), op(self.id))
    }

    fn binary(
        &self,
        rhs: Var<'t, S>,
        out: TensorBase<S>,
        op: impl FnOnce(usize, usize) -> Op<S>,
    ) -> Var<'t, S> {
        let rg = self.tape.requires(self.id) || self.tape.requires(rhs.id);
        self.tape.push(out, rg, op(self.id, rhs.id))
    }

    pub fn add(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = self.value().add(&rhs.value())?;
        Ok(self.binary(rhs, out, Op::Add))
    }

    pub fn sub(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = self.value().sub(&rhs.value())?;
        Ok(self.binary(rhs, out, Op::Sub))
    }

    pub fn mul(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = self.value().mul(&rhs.value())?;
        Ok(self.binary(rhs, out, Op::Mul))
    }

    pub fn div(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = self.value().div(&rhs.value())?;
        Ok(self.binary(rhs, out, Op::Div))
    }

    pub fn matmul(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, out, Op::MatMul))
    }

    pub fn neg(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().neg()?, Op::Neg))
    }

    pub fn exp(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().exp()?, Op::Exp))
    }

    pub fn log(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().log()?, Op::Log))
    }

    pub fn relu(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().relu()?, Op::Relu))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().sigmoid()?, Op::Sigmoid))
    }

    pub fn tanh(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().tanh()?, Op::Tanh))
    }

    pub fn scale(&self, k: f64) -> Result<Var<'t, S>> {
        let out = self.value().scale(k)?;
        Ok(self.unary(out, |input| Op::Scale(input, S::cast(k))))
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().add_scalar(k)?, Op::AddScalar))
    }

    pub fn sum(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().sum()?, Op::Sum))
    }

    pub fn mean(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().mean()?, Op::Mean))
    }

    pub fn max(&self) -> Result<Var<'t, S>> {
        let (out, arg) = self.value().max()?;
        Ok(self.unary(out, |input| Op::Max { input, arg }))
    }

    pub fn row_sum(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().row_sum()?, Op::RowSum))
    }

    pub fn row_max(&self) -> Result<Var<'t, S>> {
        let (out, args) = self.value().row_max()?;
        Ok(self.unary(out, |input| Op::RowMax { input, args }))
    }

    /// Per-row max over the classes excluding `excluded[row]` (used by
    /// margin losses; avoids materializing infinities).
    pub fn row_max_excluding(&self, excluded: &[usize]) -> Result<Var<'t, S>> {
        let (out, args) = self.value().row_max_excluding(excluded)?;
        Ok(self.unary(out, |input| Op::RowMaxExcluding { input, args }))
    }

    pub fn gather_class(&self, index: &[usize]) -> Result<Var<'t, S>> {
        let out = self.value().gather_class(index)?;
        let index = index.to_vec();
        Ok(self.unary(out, |input| Op::GatherClass { input, index }))
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t, S>> {
        let lo = S::cast(lo);
        let out = self.value().clamp_min(lo)?;
        Ok(self.unary(out, |input| Op::ClampMin { input, lo }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().reshape(shape)?, Op::Reshape))
    }

    pub fn pad2d(&self, ph: usize, pw: usize) -> Result<Var<'t, S>> {
        let out = self.value().pad2d(ph, pw)?;
        Ok(self.unary(out, |input| Op::Pad2d { input, ph, pw }))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let out = self.value().slice_rows(start, end)?;
        Ok(self.unary(out, |input| Op::SliceRows { input, start }))
    }

    /// Identity forward whose backward contributes nothing (gradient stop).
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.push(self.value(), false, Op::Detach)
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, kernel: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let k = kernel.value();
        let (xs, ks) = (x.shape().to_vec(), k.shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(CoreError::ShapeMismatch { op: "conv2d", left: xs, right: ks });
        }
        let dims = ConvDims::conv(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, pad)?;
        let out = kernels::conv2d_fwd(x.data(), k.data(), &dims);
        ensure_finite("conv2d", &out)?;
        let out = TensorBase::from_vec(vec![dims.n, dims.cout, dims.oh, dims.ow], out)?;
        Ok(self.binary(kernel, out, |input, kernel| Op::Conv2d { input, kernel, dims }))
    }

    /// Transposed convolution of an NCHW input with an IOHW kernel; output
    /// spatial size is `(in - 1) * stride - 2 * pad + k`.
    pub fn conv2d_transposed(
        &self,
        kernel: Var<'t, S>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, S>> {
        let z = self.value();
        let k = kernel.value();
        let (zs, ks) = (z.shape().to_vec(), k.shape().to_vec());
        if zs.len() != 4 || ks.len() != 4 || zs[1] != ks[0] {
            return Err(CoreError::ShapeMismatch { op: "conv2d_transposed", left: zs, right: ks });
        }
        let dims =
            ConvDims::transposed(zs[0], zs[1], zs[2], zs[3], ks[1], ks[2], ks[3], stride, pad)?;
        let out = kernels::conv2d_bwd_input(z.data(), k.data(), &dims);
        ensure_finite("conv2d_transposed", &out)?;
        let out = TensorBase::from_vec(vec![dims.n, dims.cin, dims.h, dims.w], out)?;
        Ok(self.binary(kernel, out, |input, kernel| Op::ConvTransposed2d {
            input,
            kernel,
            dims,
        }))
    }

    /// Square window max pooling; gradient routes to the first maximum of
    /// each window in row-major order.
    pub fn maxpool2d(&self, win: usize, stride: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::contract(format!("maxpool2d expects NCHW, got {s:?}")));
        }
        let dims = PoolDims::new(s[0], s[1], s[2], s[3], win, stride)?;
        let (out, arg) = kernels::maxpool_fwd(x.data(), &dims);
        let out = TensorBase::from_vec(vec![dims.n, dims.c, dims.oh, dims.ow], out)?;
        let input_len = x.numel();
        Ok(self.unary(out, |input| Op::MaxPool2d { input, arg, input_len }))
    }

    /// Add a per-channel bias `[c]` to an NCHW tensor.
    pub fn bias_nchw(&self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let x = self.value();
        let b = bias.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || b.shape() != [s[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "bias_nchw",
                left: s,
                right: b.shape().to_vec(),
            });
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = x.data().to_vec();
        for img in out.chunks_exact_mut(c * hw) {
            for (ch, &bv) in img.chunks_exact_mut(hw).zip(b.data()) {
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }
        ensure_finite("bias_nchw", &out)?;
        let out = TensorBase::from_vec(x.shape().to_vec(), out)?;
        Ok(self.binary(bias, out, |input, bias| Op::BiasNchw { input, bias }))
    }

    /// Row-wise softmax of a 2-D logits tensor.
    pub fn softmax(&self) -> Result<Var<'t, S>> {
        Ok(self.unary(self.value().softmax_rows()?, Op::Softmax))
    }

    /// Mean cross-entropy of `logits/temperature` against integer labels.
    pub fn cross_entropy(&self, labels: &[usize], temperature: f64) -> Result<Var<'t, S>> {
        if temperature <= 0.0 {
            return Err(CoreError::contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let logits = self.value();
        let shape = logits.shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::contract(format!(
                "cross_entropy expects 2-D logits, got {shape:?}"
            )));
        }
        let (n, m) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(CoreError::contract(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        let inv_t = S::cast(1.0 / temperature);
        let scaled = logits.scale(1.0 / temperature)?;
        let probs = scaled.softmax_rows()?;
        // stable per-row loss via logsumexp
        let mut total = S::zero();
        for (i, (&y, row)) in labels.iter().zip(scaled.data().chunks_exact(m)).enumerate() {
            if y >= m {
                return Err(CoreError::contract(format!(
                    "label {y} out of range for {m} classes at row {i}"
                )));
            }
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse: S = row.iter().map(|&v| (v - mx).exp()).sum();
            total += mx + lse.ln() - row[y];
        }
        let loss = total / S::cast(n as f64);
        ensure_finite("cross_entropy", std::slice::from_ref(&loss))?;
        let labels = labels.to_vec();
        Ok(self.unary(TensorBase::scalar(loss), |logits| Op::CrossEntropy {
            logits,
            labels,
            inv_temp: inv_t,
            probs,
        }))
    }

    /// Mean squared error over all elements; gradient is
    /// `2 (pred - target) / numel`.
    pub fn mse(&self, target: Var<'t, S>) -> Result<Var<'t, S>> {
        let p = self.value();
        let t = target.value();
        if p.shape() != t.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mse",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let n = S::cast(p.numel() as f64);
        let sum: S = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let loss = sum / n;
        ensure_finite("mse", std::slice::from_ref(&loss))?;
        Ok(self.binary(target, TensorBase::scalar(loss), |pred, target| Op::Mse {
            pred,
            target,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tape = TapeBase<f64>;
    type T = TensorBase<f64>;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(T::scalar(3.0), true);
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.expect(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn disjoint_uses_accumulate() {
        let tape = Tape::new();
        let x = tape.leaf(T::scalar(5.0), true);
        let y = x.add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.expect(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(T::from_vec(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let s = x.sum().unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.expect(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(T::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(CoreError::Contract(_))));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let tape = Tape::new();
        let logits = tape.leaf(T::zeros(&[4, 10]), true);
        let loss = logits.cross_entropy(&[0, 3, 5, 9], 1.0).unwrap();
        assert!((loss.value().item().unwrap() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.leaf(T::zeros(&[1, 3]), true);
        assert!(logits.cross_entropy(&[3], 1.0).is_err());
    }

    #[test]
    fn mse_gradient_formula() {
        let tape = Tape::new();
        let p = tape.leaf(T::from_vec(vec![2], vec![0.0, 0.0]).unwrap(), true);
        let t = tape.constant(T::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        let l = p.mse(t).unwrap();
        assert_eq!(l.value().item().unwrap(), 1.0);
        let g = tape.backward(l).unwrap();
        // 2 (p - t) / N = 2 (-1) / 2 = -1
        assert_eq!(g.expect(p).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(T::scalar(2.0), true);
        let d = x.detach();
        let y = d.mul(d).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_twice_same_result() {
        let tape = Tape::new();
        let x = tape.leaf(T::from_vec(vec![2], vec![1.5, -0.5]).unwrap(), true);
        let y = x.tanh().unwrap().sum().unwrap();
        let g1 = tape.backward(y).unwrap();
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g1.expect(x).unwrap(), g2.expect(x).unwrap());
    }

    #[test]
    fn maxpool_constant_routes_first() {
        let tape = Tape::new();
        let x = tape.leaf(T::ones(&[1, 1, 2, 2]), true);
        let y = x.maxpool2d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[1.0]);
        let s = y.sum().unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.expect(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
