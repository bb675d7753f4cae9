//! Quadratic consolidation penalty `(λ/2) Σ_i Ω_i (θ_ref,i − θ_i)²`.
//!
//! Head rows added after the anchor was taken have no reference value and are
//! never penalized.

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::params::{align, GradientSet, ParamSet};

/// Reference parameters, their importance and the penalty strength.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    theta_ref: ParamSet,
    omega: ImportanceMap,
    lambda: f64,
}

impl Anchor {
    pub fn new(theta_ref: ParamSet, omega: ImportanceMap, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        theta_ref.check_layout(omega.values(), "anchor")?;
        Ok(Self {
            theta_ref,
            omega,
            lambda,
        })
    }

    pub fn theta_ref(&self) -> &ParamSet {
        &self.theta_ref
    }

    pub fn omega(&self) -> &ImportanceMap {
        &self.omega
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Visits every anchored entry as `(block index in theta, flat index, Ω, θ_ref)`.
    fn for_each_anchored(
        &self,
        theta: &ParamSet,
        mut f: impl FnMut(usize, usize, f64, f64),
    ) -> Result<()> {
        let aligned = align(&self.theta_ref, theta)?;
        for (bi, (reference, current, n)) in aligned.into_iter().enumerate() {
            let Some(reference) = reference else { continue };
            let omega = self
                .omega
                .values()
                .get(&current.name)
                .expect("omega shares the anchor layout");
            let refs = &reference.value.as_slice()[..n];
            for (i, (&w, &r)) in omega.value.as_slice()[..n].iter().zip(refs).enumerate() {
                f(bi, i, w, r);
            }
        }
        Ok(())
    }
}

pub fn reg_loss(anchor: &Anchor, theta: &ParamSet) -> Result<f64> {
    let mut sum = 0.0;
    let blocks = theta.blocks();
    anchor.for_each_anchored(theta, |b, i, w, r| {
        let d = r - blocks[b].value.as_slice()[i];
        sum += w * d * d;
    })?;
    Ok(0.5 * anchor.lambda * sum)
}

/// `∂L_reg/∂θ_i = λ Ω_i (θ_i − θ_ref,i)`, zero on unanchored entries.
pub fn reg_grad(anchor: &Anchor, theta: &ParamSet) -> Result<GradientSet> {
    let mut grad = theta.zeros_like();
    add_reg_grad(anchor, theta, &mut grad)?;
    Ok(grad)
}

/// Adds the penalty gradient into `grad`, which must share `theta`'s layout.
pub fn add_reg_grad(anchor: &Anchor, theta: &ParamSet, grad: &mut GradientSet) -> Result<()> {
    theta.check_layout(grad, "reg_grad")?;
    let lambda = anchor.lambda;
    if lambda == 0.0 {
        return Ok(());
    }
    let mut updates: Vec<(usize, usize, f64)> = Vec::new();
    let blocks = theta.blocks();
    anchor.for_each_anchored(theta, |b, i, w, r| {
        updates.push((b, i, lambda * w * (blocks[b].value.as_slice()[i] - r)));
    })?;
    let mut targets: Vec<&mut [f64]> = grad.values_mut().collect();
    for (b, i, g) in updates {
        targets[b][i] += g;
    }
    Ok(())
}

/// Closed-form proximal step for the penalty alone:
/// `θ_i ← (θ_i + lr·λ·Ω_i·θ_ref,i) / (1 + lr·λ·Ω_i)`.
///
/// This minimizes `L_reg(θ') + ‖θ' − θ‖² / (2·lr)` and stays stable for any
/// `lr·λ·Ω`, where the explicit gradient step diverges once it exceeds 2.
pub fn prox_step(anchor: &Anchor, theta: &mut ParamSet, lr: f64) -> Result<()> {
    let lambda = anchor.lambda;
    if lambda == 0.0 {
        return Ok(());
    }
    let mut updates: Vec<(usize, usize, f64)> = Vec::new();
    {
        let blocks = theta.blocks();
        anchor.for_each_anchored(theta, |b, i, w, r| {
            let k = lr * lambda * w;
            if k > 0.0 {
                let t = blocks[b].value.as_slice()[i];
                updates.push((b, i, (t + k * r) / (1.0 + k)));
            }
        })?;
    }
    let mut targets: Vec<&mut [f64]> = theta.values_mut().collect();
    for (b, i, v) in updates {
        targets[b][i] = v;
    }
    Ok(())
}
