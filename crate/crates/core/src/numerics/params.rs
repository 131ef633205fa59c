use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor2D,
    grad: Option<Tensor2D>,
    first_moment: Tensor2D,
    second_moment: Tensor2D,
}

/// Named trainable tensors, their gradient slots and Adam state.
///
/// Gradient slots start uninitialized; [`ParamStore::zero_grad`] allocates them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.clone(),
            value,
            grad: None,
            first_moment: Tensor2D::zeros(r, c),
            second_moment: Tensor2D::zeros(r, c),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor2D> {
        self.slots[id.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Result<&mut Tensor2D> {
        let slot = &mut self.slots[id.0];
        slot.grad
            .as_mut()
            .ok_or_else(|| Error::State(format!("gradient slot of `{}` is uninitialized", slot.name)))
    }

    /// Mutable value and gradient of the same parameter.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> Result<(&Tensor2D, &mut Tensor2D)> {
        let slot = &mut self.slots[id.0];
        match slot.grad.as_mut() {
            Some(g) => Ok((&slot.value, g)),
            None => Err(Error::State(format!(
                "gradient slot of `{}` is uninitialized",
                slot.name
            ))),
        }
    }

    /// Allocates (or clears) every gradient slot to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            match slot.grad.as_mut() {
                Some(g) => g.fill(0.0),
                None => {
                    let (r, c) = slot.value.shape();
                    slot.grad = Some(Tensor2D::zeros(r, c));
                }
            }
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total parameter count.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every parameter, in place.
///
/// Gradient slots are read but not cleared.
pub fn adam_update(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
        }
    }
    if let Some(slot) = store.slots.iter().find(|s| s.grad.is_none()) {
        return Err(Error::State(format!(
            "gradient slot of `{}` is uninitialized",
            slot.name
        )));
    }

    let t = (store.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for slot in &mut store.slots {
        let grad = slot.grad.as_ref().expect("checked above");
        let values = slot.value.as_mut_slice();
        let m = slot.first_moment.as_mut_slice();
        let v = slot.second_moment.as_mut_slice();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.step += 1;
    Ok(())
}
