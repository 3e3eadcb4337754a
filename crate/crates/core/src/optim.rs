//! ZO-SGD on quantized parameters: gradient-norm scaling, quantization-aware
//! scaling, the rounded-and-clipped update and the cosine schedule.
//!
//! Plain SGD keeps no optimizer state.

use crate::error::{Error, Result};
use crate::quant::{check_scale, round_half_away, QTensor};

/// `NQ / (NQ + d - 1)`.
pub fn gns_factor(n: usize, q: usize, d: usize) -> f64 {
    let nq = (n.max(1) * q.max(1)) as f64;
    nq / (nq + d.max(1) as f64 - 1.0)
}

/// `1 / s²`.
pub fn qas_factor(s: f64) -> Result<f64> {
    check_scale(s)?;
    Ok(1.0 / (s * s))
}

/// Learning-rate multipliers applied on top of `η_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scaling {
    pub gns: bool,
    pub qas: bool,
}

impl Default for Scaling {
    fn default() -> Self {
        Self { gns: true, qas: true }
    }
}

/// Scalar multiplying `ĝ` in the update.
pub fn step_size(eta: f64, n: usize, q: usize, d: usize, s: f64, scaling: Scaling) -> Result<f64> {
    let mut k = eta;
    if scaling.gns {
        k *= gns_factor(n, q, d);
    }
    if scaling.qas {
        k *= qas_factor(s)?;
    }
    Ok(k)
}

/// In-place `θ̄ ← clip(θ̄ − round(k·ĝ))` for a precomputed step scalar `k`.
pub fn apply_step_inplace(theta: &mut QTensor, grad: &[f64], k: f64) -> Result<()> {
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            expected: theta.shape().to_vec(),
            got: vec![grad.len()],
        });
    }
    let (lo, hi) = theta.range();
    for (v, &g) in theta.data_mut().iter_mut().zip(grad) {
        let step = round_half_away(k * g);
        let next = if step.is_finite() {
            (*v as f64 - step).clamp(lo as f64, hi as f64)
        } else if step > 0.0 {
            lo as f64
        } else {
            hi as f64
        };
        *v = next as i32;
    }
    Ok(())
}

/// `θ̄' = clip(θ̄ − round(gns(N,Q,d) · qas(s) · η · ĝ), −Q_N, Q_P)`.
#[allow(clippy::too_many_arguments)]
pub fn apply_update(
    theta: &QTensor,
    grad: &[f64],
    eta: f64,
    n: usize,
    q: usize,
    d: usize,
    s: f64,
) -> Result<QTensor> {
    let mut out = theta.clone();
    apply_step_inplace(&mut out, grad, step_size(eta, n, q, d, s, Scaling::default())?)?;
    Ok(out)
}

/// `η0 · (1 + cos(π t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, eta0: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::InvalidArgument(format!(
            "schedule position {t} outside 0..={total}"
        )));
    }
    Ok(eta0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0)
}
