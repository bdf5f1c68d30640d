use std::collections::BTreeMap;

use super::params::{Gradients, ParameterSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. The learning rate is mutable so a schedule can
/// drive it between updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut ParameterSet<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("adam: no gradient for `{name}`")))?;
            let m = self
                .first
                .get(name)
                .ok_or_else(|| Error::invalid(format!("adam: no state for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_update", p.shape(), g.shape()));
            }
            if m.shape() != p.shape() {
                return Err(Error::shape("adam_update", p.shape(), m.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.first.get_mut(name).expect("checked above");
            let v = self.second.get_mut(name).expect("checked above");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
