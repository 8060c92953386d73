use std::collections::BTreeMap;

use crate::engine::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// `lr0 * 0.5^floor(epoch / half_every)`.
pub fn lr_schedule(epoch: usize, lr0: f64, half_every: usize) -> f64 {
    let halvings = epoch / half_every.max(1);
    lr0 * 0.5f64.powi(halvings as i32)
}

impl<T: Float> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "optimizer gradient",
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi = *pi - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
