use std::collections::BTreeMap;

use crate::error::{CtdnError, Result};
use crate::nn::params::{NamedArray, ParamId, ParamStore};
use crate::tensor::Mat;

/// Polynomial decay: `base · (1 − step/total)^power`.
pub fn poly_lr(base: f32, step: usize, total: usize, power: f32) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f32 / total as f32).min(1.0);
    base * (1.0 - frac).powf(power)
}

/// Adam with decoupled weight decay. Decay applies to matrices with more than
/// one row and column; vectors (biases, norms, scales) are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f32) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Mat> {
            s.ids()
                .map(|id| Mat::zeros(s.get(id).rows(), s.get(id).cols()))
                .collect()
        };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Applies one update. Frozen parameters are never touched; a gradient
    /// for a frozen parameter is an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Mat)], lr: f32) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let pid = ParamId(*id);
            if store.is_frozen(pid) {
                return Err(CtdnError::FrozenMutated(store.name(pid).to_string()));
            }
            let decay = {
                let p = store.get(pid);
                p.rows() > 1 && p.cols() > 1
            };
            let m = &mut self.m[*id];
            let v = &mut self.v[*id];
            let p = store.get_mut(pid);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let w = &mut p.data_mut()[i];
                if decay {
                    *w -= lr * self.weight_decay * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named arrays for checkpointing.
    pub fn state_arrays(&self, store: &ParamStore) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for id in store.ids() {
            out.push(NamedArray {
                name: format!("adamw.m.{}", store.name(id)),
                frozen: true,
                value: self.m[id.0].clone(),
            });
            out.push(NamedArray {
                name: format!("adamw.v.{}", store.name(id)),
                frozen: true,
                value: self.v[id.0].clone(),
            });
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, arrays: &[NamedArray], step: usize) {
        let by_name: BTreeMap<&str, &Mat> =
            arrays.iter().map(|a| (a.name.as_str(), &a.value)).collect();
        for id in store.ids() {
            if let Some(m) = by_name.get(format!("adamw.m.{}", store.name(id)).as_str()) {
                self.m[id.0] = (*m).clone();
            }
            if let Some(v) = by_name.get(format!("adamw.v.{}", store.name(id)).as_str()) {
                self.v[id.0] = (*v).clone();
            }
        }
        self.step = step;
    }
}
