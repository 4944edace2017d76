//! AdamW with decoupled weight decay and the learning-rate schedules used by
//! pretraining and fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::transformer::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl OptimState {
    pub fn moment_len(&self, name: &str) -> Option<usize> {
        self.moments.get(name).map(|m| m.0.len())
    }
}

/// Weight decay applies to matrices only; biases, norms, tables and the
/// mask token are left alone.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl AdamW {
    /// One update of every parameter that has a gradient. The decay is
    /// scaled by `lr`, so `lr = 0` leaves the weights untouched.
    pub fn step(&self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, state: &mut OptimState, lr: f64) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = state
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let decay = if decays(name) { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mf = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vf = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mf as f32;
                *v = vf as f32;
                let upd = (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - lr * upd) as f32;
            }
        }
    }
}

/// Gradients of every bound parameter that received one.
pub fn collect_grads(g: &Graph<f32>, bound: &Bound) -> BTreeMap<String, Tensor<f32>> {
    bound.iter().filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone()))).collect()
}

/// `base * 0.5 * (1 + cos(pi * t / horizon))`, held at zero past the horizon.
pub fn cosine_lr(base: f64, t: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let x = (t.min(horizon) as f64) / horizon as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Multiplies `base` by 0.1 at each milestone reached. Milestones are given
/// as fractions of the run so short runs decay at the same relative points.
pub fn step_lr(base: f64, epoch: usize, epochs: usize, milestone_fracs: &[f64]) -> f64 {
    let passed = milestone_fracs
        .iter()
        .filter(|&&f| {
            let at = (f * epochs as f64).round() as usize;
            at > 0 && epoch >= at
        })
        .count();
    base * 0.1f64.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("x.w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        p.insert("x.b", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_lr_without_decay_is_identity() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let grads: BTreeMap<_, _> = p.iter().map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 3.0f32))).collect();
        let mut s = OptimState::default();
        AdamW { weight_decay: 0.0, ..AdamW::default() }.step(&mut p, &grads, &mut s, 0.0);
        assert_eq!(p.checksum(""), before.checksum(""));
        AdamW::default().step(&mut p, &grads, &mut s, 0.0);
        assert_eq!(p.checksum(""), before.checksum(""));
        assert_eq!(s.moment_len("x.w"), Some(2));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = store(&[1.0, 1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("x.b".to_string(), Tensor::new(vec![2], vec![0.5f32, -4.0]).unwrap());
        let mut s = OptimState::default();
        AdamW::default().step(&mut p, &grads, &mut s, 0.01);
        let b = p.get("x.b").unwrap().data();
        assert!((b[0] - 0.99).abs() < 1e-6 && (b[1] - 1.01).abs() < 1e-6);
        // no gradient, no change
        assert_eq!(p.get("x.w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut p = store(&[2.0]);
        let grads: BTreeMap<_, _> = p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        let mut s = OptimState::default();
        AdamW { weight_decay: 0.5, ..AdamW::default() }.step(&mut p, &grads, &mut s, 0.1);
        assert!((p.get("x.w").unwrap().data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(p.get("x.b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
        assert!(cosine_lr(1.0, 20, 10).abs() < 1e-12);
        let f = [0.3, 0.6];
        assert_eq!(step_lr(1.0, 29, 100, &f), 1.0);
        assert!((step_lr(1.0, 30, 100, &f) - 0.1).abs() < 1e-12);
        assert!((step_lr(1.0, 60, 100, &f) - 0.01).abs() < 1e-12);
        assert!((step_lr(1.0, 3, 10, &f) - 0.1).abs() < 1e-12);
    }
}
