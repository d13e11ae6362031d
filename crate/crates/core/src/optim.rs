//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};
use crate::network::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied directly to the weights each step.
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: BTreeMap<String, TensorValue>,
    second: BTreeMap<String, TensorValue>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Parameters missing from `grads`
    /// (possible when a loss does not touch a head) decay but do not move.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, TensorValue>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name);
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    format!("gradient for `{name}`"),
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    step: self.step,
                    msg: format!("non-finite gradient for `{name}`"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let p = params.get_mut(&name);
            if c.weight_decay != 0.0 {
                p.mapv_inplace(|w| w - c.learning_rate * c.weight_decay * w);
            }
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            });
        }
        Ok(())
    }
}
