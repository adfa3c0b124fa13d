use super::{Scalar, Tensor};
use crate::error::TensorError;

#[derive(Clone, Debug)]
pub struct GroupNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

struct GroupNormStats {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

struct Layout {
    b: usize,
    c: usize,
    groups: usize,
    plane: usize,
}

impl Layout {
    fn group_len(&self) -> usize {
        self.c / self.groups * self.plane
    }
}

fn layout<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Layout, TensorError> {
    let [b, c, h, w] = input.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::config(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gain.len() != c {
        return Err(TensorError::shape("group_norm", "gain", c, gain.len()));
    }
    if shift.len() != c {
        return Err(TensorError::shape("group_norm", "shift", c, shift.len()));
    }
    Ok(Layout {
        b,
        c,
        groups,
        plane: h * w,
    })
}

fn stats<T: Scalar>(x: &[T], lay: &Layout, eps: f64) -> GroupNormStats {
    let n = lay.group_len();
    let count = lay.b * lay.groups;
    let mut mean = Vec::with_capacity(count);
    let mut rstd = Vec::with_capacity(count);
    for chunk in x.chunks(n).take(count) {
        let mut s = 0.0;
        for &v in chunk {
            s += v.as_f64();
        }
        let m = s / n as f64;
        let mut ss = 0.0;
        for &v in chunk {
            let d = v.as_f64() - m;
            ss += d * d;
        }
        mean.push(m);
        rstd.push(1.0 / (ss / n as f64 + eps).sqrt());
    }
    GroupNormStats { mean, rstd }
}

/// Group normalization over `[B, C, H, W]`: standardize each
/// `(sample, group of C/groups channels)` block to zero mean and unit
/// (biased) variance, then apply the per-channel affine `gain`, `shift`.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let lay = layout(input, groups, gain, shift)?;
    let x = input.data();
    let st = stats(x, &lay, eps);
    let n = lay.group_len();
    let mut out = Vec::with_capacity(x.len());
    for (gi, chunk) in x.chunks(n).enumerate() {
        let (m, r) = (st.mean[gi], st.rstd[gi]);
        let c0 = (gi % lay.groups) * (lay.c / lay.groups);
        for (i, &v) in chunk.iter().enumerate() {
            let ch = c0 + i / lay.plane;
            let xhat = T::of((v.as_f64() - m) * r);
            out.push(xhat * gain.data()[ch] + shift.data()[ch]);
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradients of [`group_norm`]; statistics are recomputed from `input`.
pub fn group_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: f64,
) -> Result<GroupNormGrads<T>, TensorError> {
    let shift = Tensor::zeros([gain.len()]);
    let lay = layout(input, groups, gain, &shift)?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::config("group_norm_backward", "upstream gradient shape differs from input"));
    }
    let x = input.data();
    let gy = grad_out.data();
    let st = stats(x, &lay, eps);
    let n = lay.group_len();
    let cg = lay.c / lay.groups;
    let mut gx = vec![T::zero(); x.len()];
    let mut ggain = vec![0.0f64; lay.c];
    let mut gshift = vec![0.0f64; lay.c];
    for gi in 0..lay.b * lay.groups {
        let (m, r) = (st.mean[gi], st.rstd[gi]);
        let c0 = (gi % lay.groups) * cg;
        let base = gi * n;
        let mut sum_dyh = 0.0;
        let mut sum_dyh_xhat = 0.0;
        for i in 0..n {
            let ch = c0 + i / lay.plane;
            let xhat = (x[base + i].as_f64() - m) * r;
            let dy = gy[base + i].as_f64();
            let dyh = dy * gain.data()[ch].as_f64();
            sum_dyh += dyh;
            sum_dyh_xhat += dyh * xhat;
            ggain[ch] += dy * xhat;
            gshift[ch] += dy;
        }
        let mean_dyh = sum_dyh / n as f64;
        let mean_dyh_xhat = sum_dyh_xhat / n as f64;
        for i in 0..n {
            let ch = c0 + i / lay.plane;
            let xhat = (x[base + i].as_f64() - m) * r;
            let dyh = gy[base + i].as_f64() * gain.data()[ch].as_f64();
            gx[base + i] = T::of(r * (dyh - mean_dyh - xhat * mean_dyh_xhat));
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        gain: Tensor::new([lay.c], ggain.into_iter().map(T::of).collect())?,
        shift: Tensor::new([lay.c], gshift.into_iter().map(T::of).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f32>::full([2, 4, 3, 3], 7.0);
        let y = group_norm(&x, 2, &Tensor::ones([4]), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gain_yields_shift() {
        let x = Tensor::<f32>::from_fn([2, 4, 3, 3], |i| (i as f32).cos());
        let y = group_norm(&x, 4, &Tensor::zeros([4]), &Tensor::full([4], -0.75), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.75));
    }

    #[test]
    fn group_means_vanish() {
        let x = Tensor::<f64>::from_fn([3, 6, 4, 5], |i| ((i * 31) % 17) as f64 * 0.3);
        let y = group_norm(&x, 3, &Tensor::ones([6]), &Tensor::zeros([6]), 1e-5).unwrap();
        for chunk in y.data().chunks(2 * 20) {
            let m: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
            assert!(m.abs() < 1e-5);
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::<f32>::zeros([1, 6, 2, 2]);
        assert!(group_norm(&x, 4, &Tensor::ones([6]), &Tensor::zeros([6]), 1e-5).is_err());
    }
}
