use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuild from saved moments.
    pub fn from_parts(
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Config("optimizer moments disagree in count or shape".into()));
        }
        Ok(Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Error unless every moment matches its parameter's shape.
    pub fn check_params(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value().shape() != m.shape() {
                return Err(Error::Config(format!(
                    "optimizer moment for `{}` has shape {:?}, parameter {:?}",
                    p.id(),
                    m.shape(),
                    p.value().shape()
                )));
            }
        }
        Ok(())
    }

    /// One update at learning rate `lr`. Gradients are left for the caller
    /// to zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<StepOutcome> {
        self.check_params(params)?;
        if !params.grads_finite() {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let shrink = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = p.split_mut();
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &g), (m, v)) in it {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *theta = T::of(theta.as_f64() * shrink - lr * update);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm when clipping happened.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> Option<f64> {
    let norm = params
        .iter()
        .flat_map(|p| p.grad().data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if !(norm > max_norm) || !norm.is_finite() {
        return None;
    }
    let s = T::of(max_norm / norm);
    for p in params.iter_mut() {
        for g in p.grad_mut().data_mut() {
            *g *= s;
        }
    }
    Some(norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(self, base: f64, warmup_fraction: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let total = total.max(1);
                let warm = (warmup_fraction * total as f64).ceil() as usize;
                if step < warm {
                    return base * (step + 1) as f64 / warm as f64;
                }
                let span = (total - warm).max(1) as f64;
                let progress = ((step - warm) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("theta", Tensor::scalar(theta));
        s
    }

    fn theta(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().value().data()[0]
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.iter_mut().next().unwrap().grad_mut().data_mut()[0] = g;
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::<f32>::from_fn([3, 2], |i| i as f32 - 2.5));
        let before = s.iter().next().unwrap().value().clone();
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..3 {
            assert_eq!(opt.step(&mut s, 0.1).unwrap(), StepOutcome::Applied);
        }
        assert_eq!(s.iter().next().unwrap().value(), &before);
    }

    #[test]
    fn first_step_hand_arithmetic() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, 1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        assert!((theta(&s) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_oracle() {
        // f(θ) = (θ − 3)², g = 2(θ − 3)
        let (lr, wd) = (0.05, 0.01);
        let want = stpl_oracles::adamw_scalar(0.5, |t| 2.0 * (t - 3.0), 3, lr, (0.9, 0.999), 1e-8, wd);
        let mut s = scalar_store(0.5);
        let mut opt = AdamW::new(&s, wd);
        for w in want {
            let g = 2.0 * (theta(&s) - 3.0);
            set_grad(&mut s, g);
            opt.step(&mut s, lr).unwrap();
            assert!((theta(&s) - w).abs() <= 1e-7, "{} vs {w}", theta(&s));
        }
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn decay_is_multiplicative_with_zero_gradient() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(&s, 0.05);
        let mut expect = 2.0;
        for _ in 0..4 {
            opt.step(&mut s, 0.01).unwrap();
            expect *= 1.0 - 0.01 * 0.05;
            assert_eq!(theta(&s), expect);
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, f64::NAN);
        let mut opt = AdamW::new(&s, 0.05);
        assert_eq!(opt.step(&mut s, 0.1).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(theta(&s), 1.0);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(opt.moments().0[0].data()[0], 0.0);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        let mut other = ParamStore::<f64>::new();
        other.push("theta", Tensor::zeros([2]));
        assert!(opt.step(&mut other, 0.1).is_err());
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut s = ParamStore::<f64>::new();
        s.push("a", Tensor::zeros([2]));
        s.iter_mut().next().unwrap().grad_mut().data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 10.0), None);
        assert_eq!(clip_grad_norm(&mut s, 1.0), Some(5.0));
        let g = s.iter().next().unwrap().grad().data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_warms_up_then_decays_to_zero() {
        let s = Schedule::Cosine;
        let lrs: Vec<f64> = (0..100).map(|i| s.lr_at(0.01, 0.05, i, 100)).collect();
        assert!((lrs[0] - 0.002).abs() < 1e-15);
        assert!((lrs[4] - 0.01).abs() < 1e-15);
        assert!(lrs[5..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] < 1e-5);
        assert_eq!(Schedule::Constant.lr_at(0.01, 0.05, 99, 100), 0.01);
    }
}
