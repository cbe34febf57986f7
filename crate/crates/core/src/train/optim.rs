//! Adam and the exponential moving average of generator weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nets::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return invalid(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return invalid("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are stored like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

fn zeroed<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut out = store.clone();
    for t in out.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
    out
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { m: zeroed(params), v: zeroed(params), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() {
            return invalid(format!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = T::of(1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = T::of(1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32));
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let ms = self.m.tensors_mut().iter_mut();
        let vs = self.v.tensors_mut().iter_mut();
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(ms).zip(vs) {
            if g.shape() != p.shape() {
                return invalid(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1t * *m + (T::one() - b1t) * g;
                *v = b2t * *v + (T::one() - b2t) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return invalid("ema and parameter stores differ");
    }
    let (d, c) = (T::of(decay), T::of(1.0 - decay));
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        if e.shape() != p.shape() {
            return invalid("ema and parameter shapes differ");
        }
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = d * *e + c * p;
        }
    }
    Ok(())
}
