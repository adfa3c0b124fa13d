//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together
//! with the values its backward rule needs. [`Tape::backward`] walks the
//! recording in reverse and accumulates (`+=`) into [`Parameter`] gradients,
//! so a value consumed twice (the decoder skip connection, a parameter used
//! by several recursive calls) sums both contributions.

mod gradcheck;
mod param;

pub use gradcheck::{finite_difference_check, gradient_check, FdConfig, FdReport, ParamReport};
pub use param::{ParamId, ParamStore, Parameter};

use thiserror::Error;

use crate::error::TensorError;
use crate::tensor::{
    self, broadcast_inner, conv2d_backward, conv_transpose2d_backward, group_norm_backward, linear_backward,
    sigmoid, ConvSpec, Primitive, Scalar, Tensor,
};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable #{0} was not recorded on this tape")]
    UnknownVar(usize),
    #[error("parameter store has {actual} entries, tape references #{index}")]
    ParamOutOfRange { index: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Softmax { x: Var, axes: Vec<usize>, tau: f64 },
    LogSoftmax { x: Var, axes: Vec<usize>, tau: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BroadcastMul(Var, Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    GroupNorm { x: Var, gain: Var, shift: Var, groups: usize, eps: f64 },
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
}

impl<T: Scalar> Op<T> {
    /// The tensor primitive this node applies; `None` for leaves.
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Input | Op::Param(_) => return None,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::ConvTranspose2d { .. } => Primitive::ConvTranspose2d,
            Op::GlobalAvgPool(_) => Primitive::GlobalAvgPool,
            Op::Linear { .. } => Primitive::Linear,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LogSoftmax { .. } => Primitive::LogSoftmax,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::BroadcastMul(..) => Primitive::BroadcastMul,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Narrow { .. } => Primitive::Narrow,
            Op::GroupNorm { .. } => Primitive::GroupNorm,
            Op::Silu(_) => Primitive::Silu,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Exp(_) => Primitive::Exp,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
        })
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    #[cfg(test)]
    visited: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            #[cfg(test)]
            visited: Vec::new(),
        }
    }

    /// A tape that only evaluates: nothing on it requires a gradient, so no
    /// backward bookkeeping is kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Primitives recorded so far, in order.
    pub fn primitives(&self) -> Vec<Primitive> {
        self.nodes.iter().filter_map(|n| n.op.primitive()).collect()
    }

    /// # Panics
    /// If `v` did not come from this tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Input };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf whose gradient flows into `store[id]` on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var, TensorError> {
        let y = tensor::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        let rg = self.any(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var, TensorError> {
        let y = tensor::conv_transpose2d(self.value(x), self.value(w), self.value(b), spec)?;
        let rg = self.any(&[x, w, b]);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, spec: *spec }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = tensor::global_avg_pool(self.value(x))?;
        let rg = self.any(&[x]);
        Ok(self.push(y, Op::GlobalAvgPool(x), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn softmax(&mut self, x: Var, axes: &[usize], tau: f64) -> Result<Var, TensorError> {
        let y = tensor::softmax_over_axes(self.value(x), axes, tau)?;
        let rg = self.any(&[x]);
        Ok(self.push(y, Op::Softmax { x, axes: axes.to_vec(), tau }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axes: &[usize], tau: f64) -> Result<Var, TensorError> {
        let y = tensor::log_softmax_over_axes(self.value(x), axes, tau)?;
        let rg = self.any(&[x]);
        Ok(self.push(y, Op::LogSoftmax { x, axes: axes.to_vec(), tau }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.any(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.value(a).sub(self.value(b))?;
        let rg = self.any(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.value(a).mul(self.value(b))?;
        let rg = self.any(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        let rg = self.any(&[a]);
        self.push(y, Op::Scale(a, s), rg)
    }

    pub fn broadcast_mul(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let y = self.value(a).broadcast_mul(self.value(s))?;
        let rg = self.any(&[a, s]);
        Ok(self.push(y, Op::BroadcastMul(a, s), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let y = self.value(a).reshape(shape)?;
        let rg = self.any(&[a]);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let y = self.value(a).narrow(axis, start, len)?;
        let rg = self.any(&[a]);
        Ok(self.push(y, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gain: Var, shift: Var, groups: usize, eps: f64) -> Result<Var, TensorError> {
        let y = tensor::group_norm(self.value(x), groups, self.value(gain), self.value(shift), eps)?;
        let rg = self.any(&[x, gain, shift]);
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gain,
                shift,
                groups,
                eps,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).silu();
        let rg = self.any(&[a]);
        self.push(y, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).sigmoid();
        let rg = self.any(&[a]);
        self.push(y, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        let rg = self.any(&[a]);
        self.push(y, Op::Exp(a), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let rg = self.any(&[a]);
        self.push(y, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).mean());
        let rg = self.any(&[a]);
        self.push(y, Op::Mean(a), rg)
    }

    /// Reverse pass from the one-element `loss`, accumulating into the
    /// gradients of `store`. Consumes the recording.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<(), AutogradError> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        let root = self.nodes.get(loss.0).ok_or(AutogradError::UnknownVar(loss.0))?;
        if root.value.len() != 1 {
            return Err(AutogradError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            #[cfg(test)]
            self.visited.push(i);
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor<T>| -> Result<(), TensorError> {
                if !nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let len = store.len();
                    let p = store
                        .try_get_mut(*id)
                        .ok_or(AutogradError::ParamOutOfRange { index: id.0, actual: len })?;
                    p.accumulate_grad(&g)?;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let cg = conv2d_backward(val(*x), val(*w), &g, spec, rg(*x))?;
                    if let Some(gx) = cg.input {
                        acc(*x, gx)?;
                    }
                    acc(*w, cg.weight)?;
                    acc(*b, cg.bias)?;
                }
                Op::ConvTranspose2d { x, w, b, spec } => {
                    let cg = conv_transpose2d_backward(val(*x), val(*w), &g, spec, rg(*x))?;
                    if let Some(gx) = cg.input {
                        acc(*x, gx)?;
                    }
                    acc(*w, cg.weight)?;
                    acc(*b, cg.bias)?;
                }
                Op::GlobalAvgPool(x) => {
                    acc(*x, tensor::global_avg_pool_backward(val(*x).shape(), &g)?)?;
                }
                Op::Linear { x, w, b } => {
                    let lg = linear_backward(val(*x), val(*w), &g)?;
                    acc(*x, lg.input)?;
                    acc(*w, lg.weight)?;
                    acc(*b, lg.bias)?;
                }
                Op::Softmax { x, axes, tau } => {
                    acc(*x, tensor::softmax::softmax_backward(&node.value, &g, axes, *tau)?)?;
                }
                Op::LogSoftmax { x, axes, tau } => {
                    acc(*x, tensor::softmax::log_softmax_backward(&node.value, &g, axes, *tau)?)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.map(|v| -v))?;
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        acc(*a, g.mul(val(*b))?)?;
                    }
                    if rg(*b) {
                        acc(*b, g.mul(val(*a))?)?;
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::BroadcastMul(a, s) => {
                    if rg(*a) {
                        acc(*a, g.broadcast_mul(val(*s))?)?;
                    }
                    if rg(*s) {
                        let av = val(*a);
                        let inner = broadcast_inner("broadcast_mul", av.shape(), val(*s).shape())?;
                        let sums = g
                            .data()
                            .chunks(inner)
                            .zip(av.data().chunks(inner))
                            .map(|(gc, ac)| {
                                let mut t = T::zero();
                                for (&gv, &xv) in gc.iter().zip(ac) {
                                    t += gv * xv;
                                }
                                t
                            })
                            .collect();
                        acc(*s, Tensor::new(val(*s).shape().to_vec(), sums)?)?;
                    }
                }
                Op::Reshape(a) => acc(*a, g.into_shape(val(*a).shape().to_vec())?)?,
                Op::Narrow { x, axis, start } => {
                    acc(*x, narrow_backward(val(*x).shape(), &g, *axis, *start))?;
                }
                Op::GroupNorm {
                    x,
                    gain,
                    shift,
                    groups,
                    eps,
                } => {
                    let ng = group_norm_backward(val(*x), *groups, val(*gain), &g, *eps)?;
                    acc(*x, ng.input)?;
                    acc(*gain, ng.gain)?;
                    acc(*shift, ng.shift)?;
                }
                Op::Silu(a) => {
                    let xv = val(*a);
                    let d = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gv)| {
                                let s = sigmoid(x);
                                gv * s * (T::one() + x * (T::one() - s))
                            })
                            .collect(),
                    )?;
                    acc(*a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|y| y * (T::one() - y)).mul(&g)?;
                    acc(*a, d)?;
                }
                Op::Exp(a) => acc(*a, node.value.mul(&g)?)?,
                Op::Sum(a) => {
                    acc(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let n = T::of(val(*a).len() as f64);
                    acc(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n))?;
                }
            }
        }
        Ok(())
    }
}

fn narrow_backward<T: Scalar>(shape: &[usize], g: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let extent = shape[axis];
    let len = g.shape()[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        od[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

#[cfg(test)]
mod tests;
