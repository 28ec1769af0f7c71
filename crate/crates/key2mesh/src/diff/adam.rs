use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamSlot {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with bias correction over a named parameter collection. Slot order
/// is fixed at construction; `step` expects the same order every call.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[(String, &Tensor)]) -> Self {
        let slots = params
            .iter()
            .map(|(name, p)| AdamSlot {
                name: name.clone(),
                m: Tensor::zeros(p.shape().to_vec()),
                v: Tensor::zeros(p.shape().to_vec()),
            })
            .collect();
        Adam { cfg, t: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    /// Restore optimizer state saved in a checkpoint.
    pub fn restore(&mut self, t: u64, slots: Vec<AdamSlot>) -> Result<()> {
        if slots.len() != self.slots.len()
            || slots.iter().zip(&self.slots).any(|(a, b)| a.name != b.name || a.m.shape() != b.m.shape())
        {
            return Err(Error::Incompatible("optimizer state does not match parameters".into()));
        }
        self.t = t;
        self.slots = slots;
        Ok(())
    }

    /// Apply one update. `params` pairs each mutable parameter with its
    /// gradient, in slot order. All gradients are validated before any
    /// state changes, so a non-finite gradient aborts the step cleanly.
    pub fn step(&mut self, params: &mut [(&mut Tensor, &Tensor)]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Incompatible(format!(
                "{} parameters for {} optimizer slots",
                params.len(),
                self.slots.len()
            )));
        }
        for (slot, (p, g)) in self.slots.iter().zip(params.iter()) {
            if p.shape() != slot.m.shape() || g.shape() != slot.m.shape() {
                return Err(Error::Incompatible(format!("shape mismatch in slot {}", slot.name)));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: slot.name.clone() });
            }
        }
        let t = self.t + 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (slot, (p, g)) in self.slots.iter_mut().zip(params.iter_mut()) {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = c.beta1 * slot.m.data()[i] + (1.0 - c.beta1) * gi;
                let v = c.beta2 * slot.v.data()[i] + (1.0 - c.beta2) * gi * gi;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.data_mut()[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFiniteState { name: slot.name.clone() });
            }
        }
        self.t = t;
        Ok(())
    }
}
