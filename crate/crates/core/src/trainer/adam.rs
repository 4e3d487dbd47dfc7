use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Adam with bias correction. Moments are keyed by parameter name so they
/// can be checkpointed next to the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Update every variable that received a gradient. Returns how many did.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<usize> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut updated = 0;
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            updated += 1;
        }
        Ok(updated)
    }
}

/// `lr0 * gamma^epoch`.
pub fn learning_rate(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() -> Result<()> {
        let x = Var::from_slice(&[1.0f32, -2.0], 2, &Device::Cpu)?;
        let loss = (x.as_tensor() * 3.0)?.sum_all()?;
        let grads = loss.backward()?;
        let mut adam = Adam::default();
        adam.step(&[("x".into(), x.clone())], &grads, 0.1)?;
        let v = x.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn schedule_is_geometric() {
        assert_eq!(learning_rate(1e-4, 0.9, 0), 1e-4);
        assert!((learning_rate(1e-4, 0.9, 3) - 1e-4 * 0.729).abs() < 1e-18);
    }
}
