use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::{Gradients, Parameter, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T: Scalar> {
    pub step: u64,
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient are skipped.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>)
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(c.eps);
        for p in params {
            let Some(g) = p.grad(grads) else { continue };
            let slot = self
                .slots
                .entry(p.name().to_string())
                .or_insert_with(|| AdamSlot {
                    step: 0,
                    m: ArrayD::zeros(g.raw_dim()),
                    v: ArrayD::zeros(g.raw_dim()),
                });
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let lr = T::from_f64_lossy(c.step_size / bc1);
            let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
            let mut value = p.value().clone();
            Zip::from(&mut value)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(g)
                .for_each(|w, m, v, &gv| {
                    *m = b1 * *m + one_b1 * gv;
                    *v = b2 * *v + one_b2 * gv * gv;
                    *w = *w - lr * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
            p.set_value(value);
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot<T>> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot<T>) {
        self.slots.insert(name, slot);
    }
}
