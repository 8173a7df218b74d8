//! Adadelta: per-coordinate step sizes from running averages of squared
//! gradients and squared updates.

use crate::error::{AutodiffError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Running averages for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaSlot<T> {
    pub mean_sq_grad: Vec<T>,
    pub mean_sq_update: Vec<T>,
}

impl<T: Scalar> AdadeltaSlot<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            mean_sq_grad: vec![T::zero(); len],
            mean_sq_update: vec![T::zero(); len],
        }
    }
}

/// Applies one update in place:
///
/// ```text
/// E[g²]  ← ρ·E[g²] + (1 − ρ)·g²
/// Δx     = −√(E[Δx²] + ε) / √(E[g²] + ε) · g
/// E[Δx²] ← ρ·E[Δx²] + (1 − ρ)·Δx²
/// x      ← x + Δx
/// ```
pub fn adadelta_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    slot: &mut AdadeltaSlot<T>,
    rho: T,
    eps: T,
) -> Result<()> {
    if params.len() != grads.len() || slot.mean_sq_grad.len() != params.len() {
        return Err(AutodiffError::Shape {
            op: "adadelta",
            detail: format!(
                "params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                slot.mean_sq_grad.len()
            ),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFinite { op: "adadelta" });
    }
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        let eg = rho * slot.mean_sq_grad[i] + (one - rho) * g * g;
        let dx = -((slot.mean_sq_update[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
        slot.mean_sq_grad[i] = eg;
        slot.mean_sq_update[i] = rho * slot.mean_sq_update[i] + (one - rho) * dx * dx;
        params[i] = params[i] + dx;
    }
    Ok(())
}

/// Optimizer over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    slots: Vec<Option<AdadeltaSlot<T>>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let value: &mut Tensor<T> = store.get_mut(id);
            let slot =
                self.slots[id.index()].get_or_insert_with(|| AdadeltaSlot::zeros(value.len()));
            adadelta_update(
                value.data_mut(),
                g.data(),
                slot,
                T::from_f64_lossy(self.rho),
                T::from_f64_lossy(self.eps),
            )?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Adadelta<T> {
    fn default() -> Self {
        Self::new(0.95, 1e-6)
    }
}
