use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec()).expect("parameter shapes are valid");
        AdamState {
            step: 0,
            m: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update over every parameter in `store`.
///
/// Gradients are read, never cleared. Every parameter must carry a gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} moments for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (id, name, t) in store.iter() {
        if t.grad().is_none() {
            return Err(Error::Contract(format!("parameter {name:?} has no gradient")));
        }
        let i = id.index();
        if state.m[i].shape() != t.shape() || state.v[i].shape() != t.shape() {
            return Err(Error::Contract(format!("moment shape mismatch for {name:?}")));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        let g: Vec<f32> = p.grad().expect("checked above").to_vec();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = state.lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to `final_ratio · base_lr`
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_ratio: f64,
}

impl WarmupCosine {
    /// Learning rate for the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (PI * progress).cos());
        self.base_lr * (self.final_ratio + (1.0 - self.final_ratio) * cosine)
    }
}
