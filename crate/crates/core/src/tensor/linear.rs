use super::gemm::matmul;
use super::{Scalar, Tensor};
use crate::error::TensorError;

#[derive(Clone, Debug)]
pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    input.expect_rank("linear", 2)?;
    weight.expect_rank("linear", 2)?;
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let (m, wn) = (weight.shape()[0], weight.shape()[1]);
    if wn != n {
        return Err(TensorError::shape("linear", "in_features", n, wn));
    }
    Ok((b, n, m))
}

/// Affine map `input[B,N] * weight[M,N]^T + bias[M]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, n, m) = check(input, weight)?;
    bias.expect_rank("linear", 1)?;
    if bias.len() != m {
        return Err(TensorError::shape("linear", "bias", m, bias.len()));
    }
    let mut out = vec![T::zero(); b * m];
    matmul(b, n, m, input.data(), false, weight.data(), true, &mut out, false);
    for row in out.chunks_mut(m) {
        for (v, &bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Tensor::new([b, m], out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>, TensorError> {
    let (b, n, m) = check(input, weight)?;
    if grad_out.shape() != [b, m] {
        return Err(TensorError::config(
            "linear_backward",
            format!("upstream gradient shape {:?} != {:?}", grad_out.shape(), [b, m]),
        ));
    }
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); b * n];
    matmul(b, m, n, gy, false, weight.data(), false, &mut gx, false);
    let mut gw = vec![T::zero(); m * n];
    matmul(m, b, n, gy, true, input.data(), false, &mut gw, false);
    let mut gb = vec![T::zero(); m];
    for row in gy.chunks(m) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new([b, n], gx)?,
        weight: Tensor::new([m, n], gw)?,
        bias: Tensor::new([m], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let x = Tensor::<f32>::from_fn([3, 4], |i| i as f32 - 5.0);
        let w = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &w, &Tensor::zeros([4])).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::<f32>::new([1, 2], vec![3.0, 1.0]).unwrap();
        let w = Tensor::new([1, 2], vec![1.0, -1.0]).unwrap();
        let b = Tensor::new([1], vec![0.5]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[2.5]);
    }

    #[test]
    fn mismatched_inner_extent() {
        let err = linear(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([4, 5]), &Tensor::zeros([4])).unwrap_err();
        assert_eq!(err, TensorError::shape("linear", "in_features", 3, 5));
    }
}
