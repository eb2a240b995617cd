use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are exposed so a
/// checkpoint can restore the optimizer exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: usize,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached throughout, or every step would extend the autograd history
            let g = g.detach();
            let m = self.first.get_mut(name).expect("moment registered");
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = self.second.get_mut(name).expect("moment registered");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&var.as_tensor().detach().sub(&(update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment buffers keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (k, t) in &self.first {
            out.insert(format!("adam.m.{k}"), t.copy()?);
        }
        for (k, t) in &self.second {
            out.insert(format!("adam.v.{k}"), t.copy()?);
        }
        Ok(out)
    }

    pub fn restore(&mut self, step: usize, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("adam.m.", &mut self.first), ("adam.v.", &mut self.second)] {
            for (k, slot) in map.iter_mut() {
                let key = format!("{prefix}{k}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer state '{key}'")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Dimension(format!("optimizer state '{key}' has wrong shape")));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new(Device::Cpu, DType::F64);
        let w = p.constant("w", &[2], 1.0).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p).unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&p, &grads).unwrap();
        // bias-corrected first step is lr * sign(g)
        for v in w.to_vec1::<f64>().unwrap() {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new(Device::Cpu, DType::F64);
        let w = p.constant("w", &[3], 5.0).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &p).unwrap();
        for _ in 0..2000 {
            let loss = w.affine(1.0, -2.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&p, &loss.backward().unwrap()).unwrap();
        }
        for v in w.to_vec1::<f64>().unwrap() {
            assert!((v - 2.0).abs() < 1e-2);
        }
    }
}
