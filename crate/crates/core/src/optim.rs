//! Adam with inspectable state, so checkpoints can restore it exactly.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    /// Keyed `<group>.<param name>`.
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `groups` that received a gradient.
    pub fn step(&mut self, groups: &[(&str, &ParamStore)], grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (group, store) in groups {
            for (name, var) in store.iter() {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let mut g = g.clone();
                if weight_decay > 0.0 {
                    g = (g + (var.as_tensor() * weight_decay)?)?;
                }
                let key = format!("{group}.{name}");
                let entry = match self.moments.remove(&key) {
                    Some(m) => m,
                    None => Moments {
                        m: var.as_tensor().zeros_like()?,
                        v: var.as_tensor().zeros_like()?,
                    },
                };
                let m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
                let v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
                self.moments.insert(key, Moments { m, v });
            }
        }
        Ok(())
    }

    /// State tensors named `adam.m.<key>` / `adam.v.<key>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.moments
            .iter()
            .flat_map(|(k, mo)| {
                [
                    (format!("adam.m.{k}"), mo.m.clone()),
                    (format!("adam.v.{k}"), mo.v.clone()),
                ]
            })
            .collect()
    }

    pub fn from_state(cfg: AdamConfig, step: u64, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, m) in tensors {
            let Some(key) = name.strip_prefix("adam.m.") else {
                continue;
            };
            let v = tensors
                .get(&format!("adam.v.{key}"))
                .ok_or_else(|| Error::State(format!("optimizer state lacks adam.v.{key}")))?;
            moments.insert(
                key.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        Ok(Self { cfg, step, moments })
    }
}
