//! Adam with moment buffers keyed by parameter name.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    pub moments: IndexMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let c1 = T::one() / (T::one() - b1.powi(t));
        let c2 = T::one() / (T::one() - b2.powi(t));
        let lr = T::c(self.lr);
        let eps = T::c(ADAM_EPS);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(mo.m.data_mut().iter_mut().zip(mo.v.data_mut().iter_mut()))
                .zip(g.data());
            for ((w, (m, v)), &gi) in it {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mh = *m * c1;
                let vh = *v * c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Group::BaseBody, Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap());
        let mut opt = Adam::new(0.01);
        opt.step(&mut ps, &grads).unwrap();
        let w = ps.tensor("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] + 0.99).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Group::Head, Tensor::from_f64(&[1], &[0.25]).unwrap()).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_f64(&[1], &[5.0]).unwrap());
        let mut opt = Adam::new(0.0);
        opt.step(&mut ps, &grads).unwrap();
        assert_eq!(ps.tensor("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("x", Group::Head, Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let x = ps.tensor("x").unwrap().item();
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * (x - 1.0)));
            opt.step(&mut ps, &grads).unwrap();
        }
        assert!((ps.tensor("x").unwrap().item() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("x", Group::Head, Tensor::scalar(1.0)).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), Tensor::scalar(f64::INFINITY));
        assert!(Adam::new(0.1).step(&mut ps, &grads).is_err());
        assert_eq!(ps.tensor("x").unwrap().item(), 1.0);
    }
}
