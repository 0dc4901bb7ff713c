//! Adam over named parameter tensors.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        // lr matches the pipeline-wide adapter tuning default.
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state is keyed by parameter name, so the same
/// optimizer instance can drive any collection of tensors as long as names
/// stay stable across steps.
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    t: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Advance the shared timestep. Call once per optimization step, before
    /// the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if self.t == 0 {
            return Err(Error::invalid("Adam::update called before begin_step"));
        }
        if !param.same_shape(grad) {
            return Err(Error::shape(format!(
                "adam '{}': param shape {:?} vs grad shape {:?}",
                name,
                param.shape(),
                grad.shape()
            )));
        }
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        if !m.same_shape(param) {
            return Err(Error::shape(format!(
                "adam '{}': state shape {:?} vs param shape {:?}",
                name,
                m.shape(),
                param.shape()
            )));
        }

        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(self.t as i32));

        let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), param.data_mut(), grad.data());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, step one of Adam moves each coordinate by
        // almost exactly lr in the descent direction.
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::<f64>::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        let mut x = Tensor::<f64>::scalar(0.0);
        for _ in 0..2000 {
            let gr = Tensor::scalar(2.0 * (x.item() - 3.0));
            opt.begin_step();
            opt.update("x", &mut x, &gr).unwrap();
        }
        assert!((x.item() - 3.0).abs() < 1e-3, "got {}", x.item());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        opt.begin_step();
        assert!(opt.update("p", &mut p, &g).is_err());
    }
}
