use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore};

/// Linear warmup followed by half-cosine decay.
///
/// Steps `0..warmup_steps` ramp linearly from `start_factor * base` to
/// `base`; from `warmup_steps` to `total_steps` the rate follows
/// `base * (1 + cos(pi * progress)) / 2` and reaches 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub start_factor: f64,
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.start_factor + (1.0 - self.start_factor) * t;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return 1.0;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn lr_at(&self, step: usize, base: f64) -> f64 {
        base * self.factor(step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(Error::shape("adam_state", &[params.len()], &[state.m.len()]));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a store, with one learning rate per group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            states: vec![AdamState::default(); store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        for (p, state) in store.iter_mut().zip(&mut self.states) {
            let rate = lr(p.group);
            adam_step(p.value.data_mut(), &p.grad, state, rate, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_schedule() -> LrSchedule {
        LrSchedule {
            total_steps: 600,
            warmup_steps: 50,
            start_factor: 0.1,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = paper_schedule();
        assert!((s.lr_at(0, 1e-5) - 1e-6).abs() < 1e-18);
        assert_eq!(s.lr_at(50, 1e-5), 1e-5);
        assert!(s.lr_at(600, 1e-5).abs() < 1e-12);
        // continuity at the warmup/cosine boundary
        let before = s.lr_at(49, 1e-5);
        let ramp_slope = 1e-5 * 0.9 / 50.0;
        assert!((1e-5 - before - ramp_slope).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::default();
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::default();
        adam_step(&mut p, &[3.0, -0.5], &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.25, 3.0];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::default();
        let sched = LrSchedule {
            total_steps: 500,
            warmup_steps: 0,
            start_factor: 1.0,
        };
        for step in 0..500 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            adam_step(&mut p, &g, &mut st, sched.lr_at(step, 0.1), &AdamConfig::default()).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-6, "{x} vs {t}");
        }
    }
}
