//! AdamW with decoupled weight decay, global-norm clipping, and the
//! linear-warmup cosine learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    /// Linear ramp `0 → max_lr` over the warmup, then cosine decay to
    /// `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One AdamW update of every parameter named in `grads`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        let n = params.get(name)?.numel();
        if g.len() != n {
            return Err(Error::State(format!("{name}: gradient has {} entries, parameter {n}", g.len())));
        }
        if let Some((m, _)) = state.moments.get(name) {
            if m.len() != n {
                return Err(Error::State(format!("{name}: moments have {} entries, parameter {n}", m.len())));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (name, g) in grads {
        let p = params.get_mut(name)?.data_mut();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..g.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &IndexMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            warmup_steps: 3000,
            total_steps: 90_000,
            max_lr: 3e-5,
            min_lr: 0.0,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(3000), 3e-5);
        assert!(s.lr_at(90_000).abs() < 1e-20);
        assert!((s.lr_at(1500) - 1.5e-5).abs() < 1e-20);
    }

    #[test]
    fn decay_only_step() {
        let mut p = store(&[2.0, -4.0]);
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), vec![0.0, 0.0]);
        let hp = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut p, &grads, &mut AdamState::default(), 0.1, &hp).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[2.0 * (1.0 - 0.001), -4.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = store(&[1.0, 1.0, 1.0]);
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), vec![0.5, -3.0, 1e-3]);
        let lr = 0.01;
        adamw_step(&mut p, &grads, &mut AdamState::default(), lr, &AdamWConfig::default()).unwrap();
        for (x, g) in p.get("p").unwrap().data().iter().zip([0.5f64, -3.0, 1e-3]) {
            let delta = x - 1.0;
            assert!(delta.abs() <= lr * (1.0 + 1e-6));
            assert!(delta.signum() == -g.signum());
            // closed form: m̂ = g, v̂ = g², Δ = −lr·g/(|g|+ε)
            assert!((delta + lr * g / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn state_mismatch_is_reported() {
        let mut p = store(&[1.0, 1.0]);
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), vec![0.5]);
        let err = adamw_step(&mut p, &grads, &mut AdamState::default(), 0.1, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), vec![3.0]);
        grads.insert("b".to_string(), vec![4.0]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
    }
}
