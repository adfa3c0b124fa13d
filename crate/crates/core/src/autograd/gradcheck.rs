//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;

use super::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FdConfig {
    /// Perturbation `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Elements checked per parameter; all of them when the parameter is smaller.
    pub max_samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged by absolute error.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_samples: 64,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub id: String,
    pub sampled: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: Option<usize>,
    /// Sampled elements whose perturbed loss or analytic gradient was NaN/inf.
    pub non_finite: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn non_finite(&self) -> usize {
        self.params.iter().map(|p| p.non_finite).sum()
    }

    pub fn passed(&self) -> bool {
        self.non_finite() == 0 && self.max_rel_error() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}), {} non-finite",
            self.max_rel_error(),
            self.tolerance,
            self.non_finite()
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<40} n={:<3} rel={:.3e} abs={:.3e}{}",
                p.id,
                p.sampled,
                p.max_rel_error,
                p.max_abs_error,
                if p.non_finite > 0 { " NON-FINITE" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Compare `analytic` (one tensor per parameter, store order) against
/// central differences of `loss`. The store is perturbed in place and
/// restored element by element.
pub fn finite_difference_check<T: Scalar>(
    store: &mut ParamStore<T>,
    analytic: &[Tensor<T>],
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
    cfg: &FdConfig,
) -> FdReport {
    assert_eq!(analytic.len(), store.len(), "one analytic gradient per parameter");
    let mut params = Vec::with_capacity(store.len());
    for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let n = store.get(id).len();
        let mut rng = rng::rng(rng::child_seed(cfg.seed, k as u64));
        let picks = if n <= cfg.max_samples {
            (0..n).collect::<Vec<_>>()
        } else {
            sample(&mut rng, n, cfg.max_samples).into_vec()
        };
        let mut rep = ParamReport {
            id: store.get(id).id().to_string(),
            sampled: picks.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: None,
            non_finite: 0,
        };
        for i in picks {
            let orig = store.get(id).value().data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + T::of(cfg.step);
            let up = loss(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig - T::of(cfg.step);
            let down = loss(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k].data()[i].as_f64();
            if !numeric.is_finite() || !a.is_finite() {
                rep.non_finite += 1;
                continue;
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            rep.max_abs_error = rep.max_abs_error.max(abs);
            if rel > rep.max_rel_error || rep.worst_index.is_none() {
                rep.max_rel_error = rep.max_rel_error.max(rel);
                rep.worst_index = Some(i);
            }
        }
        params.push(rep);
    }
    FdReport {
        params,
        tolerance: cfg.tolerance,
    }
}

/// Record `build` on a fresh tape, back-propagate, then check every
/// parameter gradient against finite differences of the same function.
/// Errors raised while re-evaluating under perturbation count as
/// non-finite samples rather than aborting the check.
pub fn gradient_check<T: Scalar>(
    store: &mut ParamStore<T>,
    mut build: impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    cfg: &FdConfig,
) -> Result<FdReport> {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic = store.grads();
    Ok(finite_difference_check(
        store,
        &analytic,
        |s| {
            let mut t = Tape::inference();
            match build(&mut t, s) {
                Ok(v) => t.value(v).data()[0].as_f64(),
                Err(_) => f64::NAN,
            }
        },
        cfg,
    ))
}
