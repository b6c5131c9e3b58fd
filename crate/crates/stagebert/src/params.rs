//! Named parameter slots.
//!
//! A [`ParamSlot`] bundles a tensor with its gradient accumulator and Adam
//! state; a [`ParamSet`] is an insertion-ordered collection of slots with
//! unique names. Model structs own sets, and anything that needs to walk all
//! trainables (the optimizer, the gradient checker, checkpointing) does so
//! through [`Parameterized`].

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr_normal::sample_normal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named trainable tensor with gradient and optimizer state.
#[derive(Clone, Debug)]
pub struct ParamSlot<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        ParamSlot {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }
}

/// Insertion-ordered map of uniquely named slots.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    slots: Vec<ParamSlot<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.slots.len());
        self.slots.push(ParamSlot::new(name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Panics on unknown names: lookups use compile-time key builders, so a
    /// miss is a bug, not an input error.
    pub fn slot(&self, name: &str) -> &ParamSlot<T> {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.slots[idx]
    }

    pub fn slot_mut(&mut self, name: &str) -> &mut ParamSlot<T> {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.slots[idx]
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.slot(name).value
    }

    /// Accumulates `delta` into the gradient of `name`.
    pub fn add_grad(&mut self, name: &str, delta: &Tensor<T>) -> Result<()> {
        self.slot_mut(name).grad.add_assign(delta)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamSlot<T>> {
        self.slots.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamSlot<T>> {
        self.slots.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(T::zero());
        }
    }

    /// Converts every slot value (grads and optimizer state reset).
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for s in &self.slots {
            out.insert(s.name.clone(), s.value.cast()).expect("unique names");
        }
        out
    }
}

/// Anything exposing an ordered list of trainable slots.
pub trait Parameterized<T: Scalar> {
    fn slots(&self) -> Vec<&ParamSlot<T>>;
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>>;

    fn zero_grads(&mut self) {
        for s in self.slots_mut() {
            s.grad.fill(T::zero());
        }
    }

    fn param_count(&self) -> usize {
        self.slots().iter().map(|s| s.value.len()).sum()
    }
}

impl<T: Scalar> Parameterized<T> for ParamSet<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        self.slots.iter().collect()
    }
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        self.slots.iter_mut().collect()
    }
}

/// Draws every entry from `N(0, std)`.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::of_f64(sample_normal(rng) * std);
    }
    t
}

/// Box-Muller standard normal sampling on an explicit RNG stream, kept local
/// so the draw sequence is pinned by this crate rather than a distribution
/// crate's internals.
mod rand_distr_normal {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let u1: f64 = rng.gen();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
