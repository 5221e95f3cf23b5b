//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// First/second moment state per named parameter, plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl AdamWState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamWState {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<f32>>, &BTreeMap<String, Tensor<f32>>) {
        (&self.m, &self.v)
    }

    pub fn insert_moments(&mut self, name: &str, m: Tensor<f32>, v: Tensor<f32>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    /// One decoupled-weight-decay step over all `grads` entries:
    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    ///
    /// `wd_for` resolves the weight decay applied to each parameter by name
    /// (0 for exempt groups). A non-finite gradient rejects the whole step.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        wd_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let wd = wd_for(name) as f32;
            let lr = lr as f32;
            let eps = self.eps as f32;
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..gd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(())
    }
}
