//! Dense row-major tensors and the forward (and adjoint) numerical kernels
//! the model is built from.
//!
//! All kernels are pure functions. Summation order inside every kernel is
//! fixed, so identical inputs produce bitwise-identical outputs.

mod conv;
mod gemm;
mod linear;
mod norm;
mod pool;
pub(crate) mod softmax;

pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGrads, ConvSpec,
};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{group_norm, group_norm_backward, GroupNormGrads};
pub use pool::{global_avg_pool, global_avg_pool_backward};
pub use softmax::{log_softmax_over_axes, softmax_over_axes, AxisPartition};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::TensorError;

/// Largest supported rank.
pub const MAX_RANK: usize = 5;

/// Floating-point element type. Model math runs in `f32`; gradient checks
/// and oracles run the same code in `f64`.
pub trait Scalar: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be in
    /// bounds of the corresponding slice. `gemm::matmul` checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Every forward primitive exposed by this module. The autograd tape must
/// carry a backward rule for each of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Conv2d,
    ConvTranspose2d,
    GlobalAvgPool,
    Linear,
    Softmax,
    LogSoftmax,
    Add,
    Sub,
    Mul,
    Scale,
    BroadcastMul,
    Reshape,
    Narrow,
    GroupNorm,
    Silu,
    Sigmoid,
    Exp,
    Sum,
    Mean,
}

impl Primitive {
    pub const ALL: [Primitive; 19] = [
        Primitive::Conv2d,
        Primitive::ConvTranspose2d,
        Primitive::GlobalAvgPool,
        Primitive::Linear,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::BroadcastMul,
        Primitive::Reshape,
        Primitive::Narrow,
        Primitive::GroupNorm,
        Primitive::Silu,
        Primitive::Sigmoid,
        Primitive::Exp,
        Primitive::Sum,
        Primitive::Mean,
    ];
}

/// How `fold_time` merges the time axis of a `[B, T, C, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldMode {
    /// `[(B*T), C, H, W]`: frames become independent images.
    Spatial,
    /// `[B, (T*C), H, W]`: frames are stacked in order on the channel axis.
    Temporal,
}

/// Dense row-major tensor with 1 to 5 axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::config(
            "tensor",
            format!("rank must be between 1 and {MAX_RANK}, got shape {shape:?}"),
        ));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(TensorError::config(
            "tensor",
            format!("axis {axis} of shape {shape:?} has zero extent"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// On an invalid shape.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4], TensorError> {
        self.expect_rank(op, 4)?;
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5], TensorError> {
        self.expect_rank(op, 5)?;
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        self.clone().into_shape(shape)
    }

    /// Metadata-only reshape; the row-major data is untouched.
    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(TensorError::ElementCount {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies `self` by `b`, where `b` matches `self` on a leading prefix of
    /// axes and has extent 1 on every trailing axis (e.g. `[B,C,H,W] * [B,C,1,1]`).
    pub fn broadcast_mul(&self, b: &Self) -> Result<Self, TensorError> {
        let inner = broadcast_inner("broadcast_mul", self.shape(), b.shape())?;
        let mut data = Vec::with_capacity(self.len());
        for (chunk, &s) in self.data.chunks(inner).zip(&b.data) {
            data.extend(chunk.iter().map(|&v| v * s));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Self {
        self.map(|v| v * sigmoid(v))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, TensorError> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::config("narrow", format!("axis {axis} out of range for rank {}", self.rank())));
        }
        let extent = self.shape[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::config(
                "narrow",
                format!("range {start}..{} exceeds extent {extent} of axis {axis}", start + len),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::config("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::config("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            p.expect_rank("concat", rank)?;
            for a in (0..rank).filter(|&a| a != axis) {
                if p.shape[a] != first.shape[a] {
                    return Err(TensorError::shape("concat", format!("axis {a}"), first.shape[a], p.shape[a]));
                }
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Merge the time axis of `[B, T, C, H, W]` into the batch or channel axis.
    pub fn fold_time(&self, mode: FoldMode) -> Result<Self, TensorError> {
        let [b, t, c, h, w] = self.dims5("fold_time")?;
        let shape = match mode {
            FoldMode::Spatial => vec![b * t, c, h, w],
            FoldMode::Temporal => vec![b, t * c, h, w],
        };
        self.reshape(shape)
    }

    /// Inverse of [`Tensor::fold_time`] for a known batch size and frame count.
    pub fn unfold_time(&self, mode: FoldMode, batch: usize, frames: usize) -> Result<Self, TensorError> {
        let [d0, d1, h, w] = self.dims4("unfold_time")?;
        let shape = match mode {
            FoldMode::Spatial => {
                if d0 != batch * frames {
                    return Err(TensorError::shape("unfold_time", "batch*time", batch * frames, d0));
                }
                vec![batch, frames, d1, h, w]
            }
            FoldMode::Temporal => {
                if d0 != batch {
                    return Err(TensorError::shape("unfold_time", "batch", batch, d0));
                }
                if d1 % frames != 0 {
                    return Err(TensorError::config(
                        "unfold_time",
                        format!("channel extent {d1} is not a multiple of {frames} frames"),
                    ));
                }
                vec![batch, frames, d1 / frames, h, w]
            }
        };
        self.reshape(shape)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.rank() != b.rank() {
        return Err(TensorError::Rank {
            op,
            expected: a.rank(),
            shape: b.shape.clone(),
        });
    }
    for (i, (&x, &y)) in a.shape.iter().zip(&b.shape).enumerate() {
        if x != y {
            return Err(TensorError::shape(op, format!("axis {i}"), x, y));
        }
    }
    Ok(())
}

/// Validates trailing-1 broadcasting of `b` onto `a`; returns the size of the
/// block of `a` each element of `b` covers.
pub(crate) fn broadcast_inner(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::Rank {
            op,
            expected: a.len(),
            shape: b.to_vec(),
        });
    }
    let lead = b.iter().rposition(|&e| e != 1).map_or(0, |i| i + 1);
    for i in 0..a.len() {
        let expected = if i < lead { a[i] } else { 1 };
        if b[i] != expected {
            return Err(TensorError::shape(op, format!("axis {i}"), expected, b[i]));
        }
    }
    Ok(a[lead..].iter().product())
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1; 6], vec![0.0]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::ElementCount { .. })
        ));
    }

    #[test]
    fn broadcast_mul_neutral_and_constant() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |i| i as f32 * 0.1 - 3.0);
        assert_eq!(x.broadcast_mul(&Tensor::ones([2, 3, 1, 1])).unwrap(), x);
        let ones = Tensor::<f32>::ones([1, 1, 2, 2]);
        let two = Tensor::full([1, 1, 1, 1], 2.0);
        assert_eq!(ones.broadcast_mul(&two).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn broadcast_mul_matches_tiling() {
        let a = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| ((i * 37) % 11) as f64 - 5.0);
        let b = Tensor::<f64>::from_fn([2, 3, 1, 1], |i| i as f64 * 0.5 - 1.0);
        let tiled = Tensor::from_fn([2, 3, 4, 5], |i| b.data()[i / 20]);
        assert_eq!(a.broadcast_mul(&b).unwrap(), a.mul(&tiled).unwrap());
    }

    #[test]
    fn broadcast_mul_rejects_incompatible() {
        let a = Tensor::<f32>::zeros([2, 3, 4, 5]);
        let err = a.broadcast_mul(&Tensor::zeros([2, 3, 2, 1])).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }), "{err}");
        assert!(a.broadcast_mul(&Tensor::zeros([2, 3, 1])).is_err());
    }

    #[test]
    fn elementwise_shape_mismatch_names_axis() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 4]);
        let err = a.add(&b).unwrap_err();
        assert_eq!(err, TensorError::shape("add", "axis 1", 3, 4));
    }

    #[test]
    fn fold_round_trips_are_identities() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 2, 2], |i| (i as f32).sin());
        for mode in [FoldMode::Spatial, FoldMode::Temporal] {
            let back = x.fold_time(mode).unwrap().unfold_time(mode, 2, 3).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn temporal_fold_orders_frames_on_channels() {
        // B=1, T=2, C=1: frame 0 becomes channel 0, frame 1 channel 1.
        let x = Tensor::<f32>::new([1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = x.fold_time(FoldMode::Temporal).unwrap();
        assert_eq!(f.shape(), &[1, 2, 1, 2]);
        assert_eq!(f.narrow(1, 0, 1).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(f.narrow(1, 1, 1).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn spatial_fold_index_arithmetic() {
        let (b, t, c, h, w) = (2, 3, 4, 2, 3);
        let x = Tensor::<f64>::from_fn([b, t, c, h, w], |i| i as f64);
        let f = x.fold_time(FoldMode::Spatial).unwrap();
        let fs = f.strides();
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let src = (((bi * t + ti) * c + ci) * h + hi) * w + wi;
                            let dst = (bi * t + ti) * fs[0] + ci * fs[1] + hi * fs[2] + wi * fs[3];
                            assert_eq!(x.data()[src], f.data()[dst]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = Tensor::<f32>::from_fn([2, 5, 3], |i| i as f32);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        assert!(x.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
