//! Noam learning-rate schedule and Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use std::collections::BTreeMap;

/// factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("noam_lr: step starts at 1"));
    }
    if d_model == 0 || warmup == 0 {
        return Err(Error::config("noam_lr: d_model and warmup must be positive"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5)))
}

/// Adam with bias correction; the learning rate is supplied per step by the
/// schedule. State keys follow parameter names, updates run in name order.
pub struct Adam<F> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter in the store. Parameters without an
    /// entry in `grads` are treated as zero-gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let corr1 = F::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = F::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lrf = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        for (name, p) in params.iter_mut() {
            let g: Option<&[F]> = match grads.get(name) {
                Some(g) => {
                    if g.len() != p.data.len() {
                        return Err(Error::contract(format!(
                            "gradient length mismatch for {name}"
                        )));
                    }
                    Some(g.as_slice())
                }
                None => None,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); p.data.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); p.data.len()]);
            for i in 0..p.data.len() {
                let gi = g.map_or_else(F::zero, |g| g[i]);
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let mhat = m[i] * corr1;
                let vhat = v[i] * corr2;
                p.data[i] = p.data[i] - lrf * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}
