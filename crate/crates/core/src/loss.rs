//! Training objective: per-pixel reconstruction error summed over frames,
//! plus the differential divergence regularizer (DDR) that matches the
//! distribution of frame-to-frame changes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Axes `(C, H, W)` of a `[B, T, C, H, W]` difference tensor, normalized jointly.
const DIFF_AXES: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the DDR term.
    pub alpha: f64,
    /// Softmax temperature applied to frame differences.
    pub tau: f64,
    pub ddr_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 0.1,
            ddr_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("loss.alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Handles to the recorded loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    /// Unweighted DDR; `None` when disabled or with a single output frame.
    pub ddr: Option<Var>,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub reconstruction: f64,
    pub ddr: Option<f64>,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossValues {
            total: v(self.total),
            reconstruction: v(self.reconstruction),
            ddr: self.ddr.map(v),
        }
    }
}

fn frames<T: Scalar>(tape: &Tape<T>, y: Var) -> Result<[usize; 5]> {
    Ok(tape.value(y).dims5("loss")?)
}

fn ensure_finite<T: Scalar>(tape: &Tape<T>, y: Var, what: &str) -> Result<()> {
    if tape.value(y).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
    }
}

/// `Δy[:, i] = y[:, i+1] - y[:, i]` along the time axis of `[B, T, C, H, W]`.
pub fn forward_difference<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let [_, t, ..] = frames(tape, y)?;
    if t < 2 {
        return Err(Error::DdrInapplicable { frames: t });
    }
    let later = tape.narrow(y, 1, 1, t - 1)?;
    let earlier = tape.narrow(y, 1, 0, t - 1)?;
    Ok(tape.sub(later, earlier)?)
}

/// `KL(softmax(Δŷ/τ) ‖ softmax(Δy/τ))` per sample and step, summed over
/// steps and averaged over the batch.
pub fn ddr<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: Var, tau: f64) -> Result<Var> {
    if tape.shape(y_hat) != tape.shape(y) {
        return Err(Error::Config(format!(
            "ddr: prediction {:?} and target {:?} differ",
            tape.shape(y_hat),
            tape.shape(y)
        )));
    }
    ensure_finite(tape, y_hat, "prediction")?;
    ensure_finite(tape, y, "target")?;
    let batch = frames(tape, y)?[0];
    let dp = forward_difference(tape, y_hat)?;
    let dq = forward_difference(tape, y)?;
    let lp = tape.log_softmax(dp, &DIFF_AXES, tau)?;
    let lq = tape.log_softmax(dq, &DIFF_AXES, tau)?;
    let p = tape.exp(lp);
    let gap = tape.sub(lp, lq)?;
    let terms = tape.mul(p, gap)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, T::of(1.0 / batch as f64)))
}

/// Squared error summed over every element, divided by `B·C·H·W`.
pub fn reconstruction<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: Var) -> Result<Var> {
    let [b, _, c, h, w] = frames(tape, y_hat)?;
    let d = tape.sub(y_hat, y)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::of(1.0 / (b * c * h * w) as f64)))
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: Var, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    ensure_finite(tape, y_hat, "prediction")?;
    ensure_finite(tape, y, "target")?;
    let reconstruction = reconstruction(tape, y_hat, y)?;
    let frames_out = frames(tape, y)?[1];
    if !cfg.ddr_enabled || frames_out < 2 {
        return Ok(LossTerms {
            total: reconstruction,
            reconstruction,
            ddr: None,
        });
    }
    let d = ddr(tape, y_hat, y, cfg.tau)?;
    let weighted = tape.scale(d, T::of(cfg.alpha));
    let total = tape.add(reconstruction, weighted)?;
    Ok(LossTerms {
        total,
        reconstruction,
        ddr: Some(d),
    })
}

/// Evaluate the objective on plain tensors without recording gradients.
pub fn evaluate_loss<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<LossValues> {
    let mut tape = Tape::inference();
    let p = tape.input(y_hat.clone());
    let q = tape.input(y.clone());
    Ok(total_loss(&mut tape, p, q, cfg)?.values(&tape))
}
