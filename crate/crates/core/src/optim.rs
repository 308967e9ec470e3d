//! Adam with bias correction, and the step learning-rate schedule.

use std::collections::BTreeMap;

use capsnet3d_tensor::Element;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub hyper: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Moments are kept in
    /// 64-bit. A non-finite gradient aborts before anything is modified.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        for (path, g) in grads {
            let p = store.param(path)?;
            if p.len() != g.len() {
                return Err(Error::Argument(format!(
                    "gradient for `{path}` has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient {} at element {i} of parameter `{path}`",
                    g[i]
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (path, g) in grads {
            let p = store.param_mut(path)?;
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64_lossy();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

/// `base · decay^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, every: usize, decay: f64) -> f64 {
    base_lr * decay.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use capsnet3d_tensor::Tensor;

    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_param("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    fn grads(g: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), g.to_vec())])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, &grads(&[0.0, 0.0]), 0.001).unwrap();
        }
        assert_eq!(s.param("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = store(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(&[3.0, -0.5]), 0.001).unwrap();
        let w = s.param("w").unwrap().data();
        assert!((w[0] + 0.001).abs() < 1e-9);
        assert!((w[1] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut s = store(&[0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..2000 {
            adam.step(&mut s, &grads(&[0.37]), 0.01).unwrap();
            let w = s.param("w").unwrap().data()[0];
            last = prev - w;
            prev = w;
        }
        assert!((last - 0.01).abs() < 1e-8, "{last}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut s, &grads(&[f64::NAN]), 0.001).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.param("w").unwrap().data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        assert_eq!(lr_schedule(0, 0.001, 20, 0.5), 0.001);
        assert_eq!(lr_schedule(19, 0.001, 20, 0.5), 0.001);
        assert_eq!(lr_schedule(20, 0.001, 20, 0.5), 0.0005);
        assert_eq!(lr_schedule(59, 0.001, 20, 0.5), 0.00025);
        let lrs: Vec<f64> = (0..100).map(|e| lr_schedule(e, 0.001, 20, 0.5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
