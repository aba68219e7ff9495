//! SGD with classical momentum and decoupled-from-nothing weight decay:
//! decay is added to the raw gradient before the momentum update, i.e.
//!
//! ```text
//! v ← momentum·v + (g + weight_decay·p)
//! p ← p − lr·v
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.001, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter name. BTreeMap so
/// iteration (and therefore checkpoint layout) is ordered.
pub struct SgdState<E: Element> {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SgdState { cfg, velocity: BTreeMap::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One parameter update in place. The velocity buffer is created lazily
    /// at zero on first use.
    pub fn step(&mut self, name: &str, param: &mut Tensor<E>, grad: &[E]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(Error::shape(
                "sgd.step",
                format!("grad len {} vs param {:?}", grad.len(), param.shape()),
            ));
        }
        let mom = E::from_f64(self.cfg.momentum);
        let wd = E::from_f64(self.cfg.weight_decay);
        let lr = E::from_f64(self.cfg.lr);
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![E::zero(); grad.len()]);
        if v.len() != grad.len() {
            return Err(Error::shape(
                "sgd.step",
                format!("velocity len {} vs grad {}", v.len(), grad.len()),
            ));
        }
        let mut data = param.as_slice().to_vec();
        for i in 0..grad.len() {
            v[i] = mom * v[i] + (grad[i] + wd * data[i]);
            data[i] = data[i] - lr * v[i];
        }
        param.set_data(data)?;
        Ok(())
    }

    /// Velocity buffers in name order, for checkpointing.
    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[E])> {
        self.velocity.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Restore one velocity buffer from a checkpoint.
    pub fn set_velocity(&mut self, name: &str, v: Vec<E>) {
        self.velocity.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates_over_two_steps() {
        // lr 0.1, momentum 0.9, no decay; grad 1 both steps.
        let mut sgd: SgdState<f64> =
            SgdState::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        let mut p = Tensor::from_f64s(vec![1], &[1.0]).unwrap();
        sgd.step("w", &mut p, &[1.0]).unwrap();
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-12, "first delta must be lr·g = 0.1");
        sgd.step("w", &mut p, &[1.0]).unwrap();
        // v = 0.9·1 + 1 = 1.9 → delta 0.19
        assert!((p.as_slice()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_alone_scales_parameter() {
        let mut sgd: SgdState<f64> =
            SgdState::new(SgdConfig { lr: 0.001, momentum: 0.0, weight_decay: 1e-4 }).unwrap();
        let mut p = Tensor::from_f64s(vec![1], &[2.0]).unwrap();
        sgd.step("w", &mut p, &[0.0]).unwrap();
        // p ← p·(1 − lr·wd) = p·(1 − 1e-7)
        assert!((p.as_slice()[0] - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(SgdConfig { lr: 0.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: -0.1, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn separate_names_have_separate_velocities() {
        let mut sgd: SgdState<f64> =
            SgdState::new(SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        let mut a = Tensor::from_f64s(vec![1], &[0.0]).unwrap();
        let mut b = Tensor::from_f64s(vec![1], &[0.0]).unwrap();
        sgd.step("a", &mut a, &[1.0]).unwrap();
        sgd.step("b", &mut b, &[1.0]).unwrap();
        // neither has inherited the other's momentum
        assert_eq!(a.as_slice()[0], -1.0);
        assert_eq!(b.as_slice()[0], -1.0);
    }
}
