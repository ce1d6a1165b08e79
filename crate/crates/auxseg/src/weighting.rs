//! Combination of the segmentation and depth losses into one training loss.
//!
//! Three rules are provided:
//!   * fixed weights: L = a·L_seg + b·L_depth with constant a, b;
//!   * task weight balancing (TWB): each task is weighted by the other
//!     task's current loss, so the total equals 2·L_seg·L_depth;
//!   * focused task weight balancing (FTWB): the main-task weight is
//!     inflated by its own loss, giving (L_seg + 1)·L_seg·L_depth.
//!
//! By default the loss-derived weights are detached: they are plain numbers
//! recomputed each batch, and no gradient flows through them. The
//! undetached interpretation (differentiating the full product) is kept
//! behind a flag; its parameter gradient is exactly twice the detached TWB
//! gradient, so either choice descends the same direction.

use crate::error::{AuxError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightRule {
    Fixed { lambda_seg: f64, lambda_depth: f64 },
    Twb,
    Ftwb,
}

/// Exponential moving average over the raw weights, applied per batch.
#[derive(Clone, Debug)]
pub struct EmaSmoothing {
    pub beta: f64,
    state: Option<(f64, f64)>,
}

impl EmaSmoothing {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(AuxError::InvalidArgument(format!(
                "EMA decay must lie in (0, 1), got {beta}"
            )));
        }
        Ok(EmaSmoothing { beta, state: None })
    }

    /// First call adopts the raw weights; later calls blend
    /// `state <- beta*state + (1-beta)*raw`.
    pub fn apply(&mut self, raw_seg: f64, raw_depth: f64) -> (f64, f64) {
        let next = match self.state {
            None => (raw_seg, raw_depth),
            Some((s, d)) => (
                self.beta * s + (1.0 - self.beta) * raw_seg,
                self.beta * d + (1.0 - self.beta) * raw_depth,
            ),
        };
        self.state = Some(next);
        next
    }

    pub fn state(&self) -> Option<(f64, f64)> {
        self.state
    }
}

/// Per-batch weighting state: rule, optional smoothing, detach choice.
#[derive(Clone, Debug)]
pub struct WeightStrategy {
    pub rule: WeightRule,
    pub ema: Option<EmaSmoothing>,
    pub detached: bool,
}

impl WeightStrategy {
    pub fn new(rule: WeightRule) -> Self {
        WeightStrategy { rule, ema: None, detached: true }
    }

    pub fn with_ema(mut self, beta: f64) -> Result<Self> {
        self.ema = Some(EmaSmoothing::new(beta)?);
        Ok(self)
    }

    pub fn undetached(mut self) -> Self {
        self.detached = false;
        self
    }

    /// Combine the current batch losses. Dispatches on the rule, applies
    /// EMA smoothing when configured (fixed weights are constants already
    /// and ignore it), and updates the EMA state.
    pub fn step(&mut self, l_seg: &Tensor, l_depth: &Tensor) -> Result<CombineResult> {
        let result = match self.rule {
            WeightRule::Fixed { lambda_seg, lambda_depth } => {
                return combine_fixed(l_seg, l_depth, lambda_seg, lambda_depth);
            }
            WeightRule::Twb => combine_twb(l_seg, l_depth, self.detached)?,
            WeightRule::Ftwb => combine_ftwb(l_seg, l_depth, self.detached)?,
        };
        match &mut self.ema {
            None => Ok(result),
            Some(ema) => {
                let (s, d) = ema.apply(result.lambda_seg, result.lambda_depth);
                // Smoothed weights replace the raw ones; the total is rebuilt
                // as a plain weighted sum (weights are batch constants).
                let total = weighted_sum(l_seg, l_depth, s, d)?;
                Ok(CombineResult {
                    lambda_seg: s,
                    lambda_depth: d,
                    total,
                    loss_seg: result.loss_seg,
                    loss_depth: result.loss_depth,
                })
            }
        }
    }
}

/// Outcome of combining the two task losses for one batch.
#[derive(Clone, Debug)]
pub struct CombineResult {
    pub lambda_seg: f64,
    pub lambda_depth: f64,
    /// Differentiable total; the lambdas enter as constants unless the
    /// strategy was switched to the undetached product form.
    pub total: Tensor,
    pub loss_seg: f64,
    pub loss_depth: f64,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(AuxError::NonFinite(format!("{name} = {v}")));
    }
    Ok(())
}

fn weighted_sum(l_seg: &Tensor, l_depth: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    l_seg.scalar_mul(a).add(&l_depth.scalar_mul(b))
}

/// Constant weights: L = a·L_seg + b·L_depth.
pub fn combine_fixed(l_seg: &Tensor, l_depth: &Tensor, lambda_seg: f64, lambda_depth: f64) -> Result<CombineResult> {
    if lambda_seg <= 0.0 || lambda_depth <= 0.0 {
        return Err(AuxError::InvalidArgument(format!(
            "fixed weights must be positive, got ({lambda_seg}, {lambda_depth})"
        )));
    }
    let (ls, ld) = (l_seg.value(), l_depth.value());
    check_finite("L_seg", ls)?;
    check_finite("L_depth", ld)?;
    Ok(CombineResult {
        lambda_seg,
        lambda_depth,
        total: weighted_sum(l_seg, l_depth, lambda_seg, lambda_depth)?,
        loss_seg: ls,
        loss_depth: ld,
    })
}

/// Task weight balancing: each weight is the other task's loss value, so
/// the total equals 2·L_seg·L_depth.
pub fn combine_twb(l_seg: &Tensor, l_depth: &Tensor, detached: bool) -> Result<CombineResult> {
    let (ls, ld) = (l_seg.value(), l_depth.value());
    check_finite("L_seg", ls)?;
    check_finite("L_depth", ld)?;
    let total = if detached {
        weighted_sum(l_seg, l_depth, ld, ls)?
    } else {
        l_seg.mul(l_depth)?.scalar_mul(2.0)
    };
    Ok(CombineResult { lambda_seg: ld, lambda_depth: ls, total, loss_seg: ls, loss_depth: ld })
}

/// Focused task weight balancing: the segmentation weight is the product of
/// both losses, the depth weight the segmentation loss, so the total equals
/// (L_seg + 1)·L_seg·L_depth.
pub fn combine_ftwb(l_seg: &Tensor, l_depth: &Tensor, detached: bool) -> Result<CombineResult> {
    let (ls, ld) = (l_seg.value(), l_depth.value());
    check_finite("L_seg", ls)?;
    check_finite("L_depth", ld)?;
    let lambda_seg = ls * ld;
    let lambda_depth = ls;
    let total = if detached {
        weighted_sum(l_seg, l_depth, lambda_seg, lambda_depth)?
    } else {
        let one = Tensor::scalar(1.0);
        l_seg.mul(l_depth)?.mul(&l_seg.add(&one)?)?
    };
    Ok(CombineResult { lambda_seg, lambda_depth, total, loss_seg: ls, loss_depth: ld })
}
