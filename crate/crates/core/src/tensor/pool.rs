use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Mean over each `H x W` plane: `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [b, c, h, w] = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let denom = T::of(plane as f64);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| {
            let mut s = T::zero();
            for &v in p {
                s += v;
            }
            s / denom
        })
        .collect();
    Tensor::new([b, c, 1, 1], out)
}

/// Spreads each pooled gradient uniformly over its plane.
pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let plane: usize = input_shape[2..].iter().product();
    let denom = T::of(plane as f64);
    let mut out = Vec::with_capacity(plane * grad_out.len());
    for &g in grad_out.data() {
        out.extend(std::iter::repeat(g / denom).take(plane));
    }
    Tensor::new(input_shape.to_vec(), out)
}
