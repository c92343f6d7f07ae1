//! Adam with bias correction and a per-parameter freeze mask.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{FreezeMask, ParamGrads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, path: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first.get(path)?, self.second.get(path)?))
    }

    /// One update. Frozen parameters, and parameters absent from `grads`, are
    /// left untouched together with their moment estimates.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        freeze: &FreezeMask,
    ) -> Result<()> {
        freeze.check(params)?;
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for ((path, p), &frozen) in params.iter_mut().zip(freeze.flags()) {
            if frozen {
                continue;
            }
            let Some(g) = grads.get(path) else { continue };
            if g.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "gradient for {path} has {} entries, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let m = self
                .first
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "optimizer state for {path} is {:?}, parameter is {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s
    }

    fn grads(g: f64) -> ParamGrads<f64> {
        BTreeMap::from([("w".to_string(), vec![g])])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        let mask = FreezeMask::none(&s);
        for _ in 0..3 {
            opt.step(&mut s, &grads(0.0), &mask).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn frozen_param_unchanged() {
        let mut s = single(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        let mask = FreezeMask::all(&s);
        opt.step(&mut s, &grads(5.0), &mask).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0].to_bits(), 0.7f64.to_bits());
        assert!(opt.moments("w").is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg);
        let mask = FreezeMask::none(&s);
        opt.step(&mut s, &grads(1.0), &mask).unwrap();
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_drift_is_rejected() {
        let mut s = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mask = FreezeMask::none(&s);
        opt.step(&mut s, &grads(1.0), &mask).unwrap();
        s.set("w", Tensor::zeros([2]));
        let g = BTreeMap::from([("w".to_string(), vec![1.0, 1.0])]);
        assert!(matches!(opt.step(&mut s, &g, &mask), Err(Error::Contract(_))));
    }
}
