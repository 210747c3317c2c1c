use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::params::{Kind, Params};
use crate::{Float, NnError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every weight that has a gradient. Buffers are never touched.
    pub fn update(&mut self, params: &mut Params<T>, grads: &BTreeMap<String, ArrayD<T>>, lr: f64) -> Result<(), NnError> {
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(lr / c1);
        let c2s = T::of(c2.sqrt());
        let eps = T::of(self.config.eps);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        for (name, g) in grads {
            match params.entry(name) {
                Some(e) if e.kind == Kind::Weight => {
                    if e.value.shape() != g.shape() {
                        return Err(NnError::Shape(format!("gradient for {name} has shape {:?}", g.shape())));
                    }
                }
                Some(_) => continue,
                None => return Err(NnError::MissingParam(name.clone())),
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let w = params.get_mut(name).expect("checked above");
            Zip::from(w).and(&mut *m).and(&mut *v).and(g).for_each(|w, m, v, &g| {
                *m = tb1 * *m + (T::one() - tb1) * g;
                *v = tb2 * *v + (T::one() - tb2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / c2s + eps);
            });
        }
        Ok(())
    }
}
