use ndarray::Zip;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the gradients.
///
/// If any gradient is non-finite nothing is updated and the first offending
/// parameter is reported.
pub fn adam_step(store: &mut ParamStore, lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let AdamConfig { beta1, beta2, eps } = cfg;
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        Zip::from(&mut p.value)
            .and(&mut p.m)
            .and(&mut p.v)
            .and(&p.grad)
            .for_each(|x, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        p.grad.fill(0.0);
    }
    Ok(())
}
