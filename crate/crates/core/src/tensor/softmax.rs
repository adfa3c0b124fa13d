use super::{strides, Scalar, Tensor};
use crate::error::TensorError;

/// Split of a tensor's flat index space into independent normalization
/// slices: each slice is `outer[o] + inner[i]` for all `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisPartition {
    pub outer: Vec<usize>,
    pub inner: Vec<usize>,
}

impl AxisPartition {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self, TensorError> {
        if axes.is_empty() {
            return Err(TensorError::config("softmax", "no reduction axes given"));
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::config(
                    "softmax",
                    format!("axis {a} out of range for rank {}", shape.len()),
                ));
            }
            if reduced[a] {
                return Err(TensorError::config("softmax", format!("axis {a} listed twice")));
            }
            reduced[a] = true;
        }
        let st = strides(shape);
        let offsets = |keep: bool| {
            let st = &st;
            let mut offs = vec![0usize];
            for (a, &e) in shape.iter().enumerate() {
                if reduced[a] == keep {
                    continue;
                }
                offs = offs
                    .iter()
                    .flat_map(|&o| (0..e).map(move |i| o + i * st[a]))
                    .collect();
            }
            offs
        };
        Ok(Self {
            outer: offsets(true),
            inner: offsets(false),
        })
    }
}

fn check_tau(tau: f64) -> Result<(), TensorError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TensorError::config("softmax", format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Shared pass: for each slice, the stabilized `x/tau - max` and its
/// log-sum-exp.
fn normalize<T: Scalar>(
    input: &Tensor<T>,
    axes: &[usize],
    tau: f64,
    log: bool,
) -> Result<Tensor<T>, TensorError> {
    check_tau(tau)?;
    let part = AxisPartition::new(input.shape(), axes)?;
    let x = input.data();
    let inv = T::of(1.0 / tau);
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![T::zero(); part.inner.len()];
    for &o in &part.outer {
        let mut max = T::neg_infinity();
        for (b, &i) in buf.iter_mut().zip(&part.inner) {
            *b = x[o + i] * inv;
            max = max.max(*b);
        }
        let mut sum = T::zero();
        for b in buf.iter_mut() {
            *b = *b - max;
            sum += b.exp();
        }
        if log {
            let lse = sum.ln();
            for (b, &i) in buf.iter().zip(&part.inner) {
                out[o + i] = *b - lse;
            }
        } else {
            for (b, &i) in buf.iter().zip(&part.inner) {
                out[o + i] = b.exp() / sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `exp(x/tau)` normalized jointly over `axes`, separately for every index of
/// the remaining axes. Stabilized by subtracting the slice maximum.
pub fn softmax_over_axes<T: Scalar>(input: &Tensor<T>, axes: &[usize], tau: f64) -> Result<Tensor<T>, TensorError> {
    normalize(input, axes, tau, false)
}

/// Logarithm of [`softmax_over_axes`], computed as `x/tau - logsumexp(x/tau)`.
pub fn log_softmax_over_axes<T: Scalar>(
    input: &Tensor<T>,
    axes: &[usize],
    tau: f64,
) -> Result<Tensor<T>, TensorError> {
    normalize(input, axes, tau, true)
}

/// Vector-Jacobian product of the softmax given its output `y`:
/// `(y * (g - <g, y>)) / tau` per slice.
pub(crate) fn softmax_backward<T: Scalar>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    axes: &[usize],
    tau: f64,
) -> Result<Tensor<T>, TensorError> {
    let part = AxisPartition::new(y.shape(), axes)?;
    let (yd, g) = (y.data(), grad_out.data());
    let inv = T::of(1.0 / tau);
    let mut out = vec![T::zero(); yd.len()];
    for &o in &part.outer {
        let mut dot = T::zero();
        for &i in &part.inner {
            dot += g[o + i] * yd[o + i];
        }
        for &i in &part.inner {
            out[o + i] = yd[o + i] * (g[o + i] - dot) * inv;
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Vector-Jacobian product of the log-softmax given its output `ly`:
/// `(g - softmax * sum(g)) / tau` per slice.
pub(crate) fn log_softmax_backward<T: Scalar>(
    ly: &Tensor<T>,
    grad_out: &Tensor<T>,
    axes: &[usize],
    tau: f64,
) -> Result<Tensor<T>, TensorError> {
    let part = AxisPartition::new(ly.shape(), axes)?;
    let (yd, g) = (ly.data(), grad_out.data());
    let inv = T::of(1.0 / tau);
    let mut out = vec![T::zero(); yd.len()];
    for &o in &part.outer {
        let mut total = T::zero();
        for &i in &part.inner {
            total += g[o + i];
        }
        for &i in &part.inner {
            out[o + i] = (g[o + i] - yd[o + i].exp() * total) * inv;
        }
    }
    Tensor::new(ly.shape().to_vec(), out)
}
