//! Inner (AdamW) and outer (Nesterov SGD) optimizers, plus the inner
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::config("beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("beta2", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-worker AdamW state. `lr` is the rate used by the next step and is
/// overwritten by the schedule before every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(len: usize, cfg: &AdamWConfig) -> Self {
        AdamWState {
            first_moment: ParamVector::zeros(len),
            second_moment: ParamVector::zeros(len),
            step_count: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
///
/// `step` is only used to label a non-finite gradient in the error.
pub fn adamw_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    state: &mut AdamWState,
    step: u64,
) -> Result<()> {
    if grad.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::internal(format!(
            "adamw length mismatch: params {}, grad {}, moments {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "gradient".into(),
        });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;

    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (i, (theta, &g)) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .enumerate()
    {
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        *theta = *theta * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Outer optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NesterovConfig {
    pub outer_lr: f64,
    pub momentum: f64,
}

impl Default for NesterovConfig {
    fn default() -> Self {
        NesterovConfig {
            outer_lr: 0.7,
            momentum: 0.9,
        }
    }
}

impl NesterovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::config("outer_lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("outer_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Momentum buffer for one fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct NesterovState {
    pub momentum_buffer: ParamVector,
    pub outer_lr: f64,
    pub momentum: f64,
}

impl NesterovState {
    pub fn new(len: usize, cfg: &NesterovConfig) -> Self {
        NesterovState {
            momentum_buffer: ParamVector::zeros(len),
            outer_lr: cfg.outer_lr,
            momentum: cfg.momentum,
        }
    }
}

/// Applies an aggregated pseudo-gradient `delta` (local minus global) to a
/// global fragment. The outer gradient is `-delta`.
pub fn outer_step(
    global: &mut ParamVector,
    delta: &ParamVector,
    state: &mut NesterovState,
) -> Result<()> {
    if delta.len() != global.len() || state.momentum_buffer.len() != global.len() {
        return Err(Error::internal(format!(
            "outer step length mismatch: global {}, delta {}, buffer {}",
            global.len(),
            delta.len(),
            state.momentum_buffer.len()
        )));
    }
    let mu = state.momentum;
    let lr = state.outer_lr;
    let buf = state.momentum_buffer.as_mut_slice();
    for (i, (theta, &d)) in global
        .as_mut_slice()
        .iter_mut()
        .zip(delta.as_slice())
        .enumerate()
    {
        let g = -d;
        buf[i] = mu * buf[i] + g;
        *theta -= lr * (g + mu * buf[i]);
    }
    Ok(())
}

/// Linear warmup followed by cosine decay down to `min_lr_ratio * peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr_ratio: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
            min_lr_ratio: 1.0,
        }
    }

    /// Learning rate for the zero-based local step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return self.peak_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let floor = self.peak_lr * self.min_lr_ratio;
        floor + (self.peak_lr - floor) * cosine
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr: f64, wd: f64) -> AdamWState {
        AdamWState::new(
            1,
            &AdamWConfig {
                lr,
                weight_decay: wd,
                ..AdamWConfig::default()
            },
        )
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = ParamVector::new(vec![0.3, -1.2]);
        let before = p.clone();
        let mut s = AdamWState::new(2, &cfg);
        adamw_step(&mut p, &ParamVector::zeros(2), &mut s, 0).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);

        // moments left over from earlier steps shrink geometrically
        let mut s = AdamWState::new(2, &cfg);
        s.first_moment = ParamVector::new(vec![0.5, -0.5]);
        s.second_moment = ParamVector::new(vec![0.1, 0.2]);
        adamw_step(&mut p, &ParamVector::zeros(2), &mut s, 0).unwrap();
        assert_eq!(s.first_moment.as_slice(), &[0.9 * 0.5, 0.9 * -0.5]);
        assert_eq!(s.second_moment.as_slice(), &[0.999 * 0.1, 0.999 * 0.2]);
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        // theta = 1, g = 0.5, lr = 0.1, beta = (0.9, 0.999), eps = 1e-8
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        let mut p = ParamVector::new(vec![1.0]);
        let mut s = state(0.1, 0.0);
        adamw_step(&mut p, &ParamVector::new(vec![0.5]), &mut s, 0).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() <= 1e-12 * expected.abs());
        assert!((s.first_moment[0] - 0.05).abs() < 1e-15);
        assert!((s.second_moment[0] - 0.00025).abs() < 1e-15);

        // With decoupled decay the parameter is shrunk before the Adam delta.
        let mut p = ParamVector::new(vec![1.0]);
        let mut s = state(0.1, 0.1);
        adamw_step(&mut p, &ParamVector::new(vec![0.5]), &mut s, 0).unwrap();
        let expected = 1.0 * (1.0 - 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn two_constant_gradient_steps_match_recurrence() {
        let (lr, b1, b2, eps, wd, g) = (0.05, 0.9, 0.999, 1e-8, 0.1, 0.3);
        let mut theta = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta = theta * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = ParamVector::new(vec![2.0]);
        let mut s = state(lr, wd);
        for step in 0..2 {
            adamw_step(&mut p, &ParamVector::new(vec![g]), &mut s, step).unwrap();
        }
        assert!((p[0] - theta).abs() <= 1e-12 * theta.abs());
    }

    #[test]
    fn adamw_is_deterministic() {
        let grad = ParamVector::new(vec![0.1, -0.7, 3.0]);
        let run = || {
            let mut p = ParamVector::new(vec![1.0, 2.0, 3.0]);
            let mut s = AdamWState::new(3, &AdamWConfig::default());
            for step in 0..10 {
                adamw_step(&mut p, &grad, &mut s, step).unwrap();
            }
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = ParamVector::new(vec![1.0]);
        let mut s = state(0.1, 0.0);
        let err = adamw_step(&mut p, &ParamVector::new(vec![f64::NAN]), &mut s, 42).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 42, .. }));
    }

    #[test]
    fn descends_on_a_quadratic() {
        // f(theta) = theta^2 / 2, gradient = theta
        let mut p = ParamVector::new(vec![1.0]);
        let mut s = state(0.01, 0.0);
        let mut prev = 1.0f64;
        for step in 0..100 {
            let g = p.clone();
            adamw_step(&mut p, &g, &mut s, step).unwrap();
            if step >= 1 {
                assert!(p[0].abs() < prev, "step {step}: {} !< {prev}", p[0].abs());
            }
            prev = p[0].abs();
        }
        assert!(prev < 1.0);
    }

    #[test]
    fn outer_step_plain_averaging() {
        let cfg = NesterovConfig {
            outer_lr: 1.0,
            momentum: 0.0,
        };
        let mut global = ParamVector::new(vec![0.25, -3.0, 8.5]);
        let old = global.clone();
        let delta = ParamVector::new(vec![0.5, 1.25, -0.125]);
        let mut s = NesterovState::new(3, &cfg);
        outer_step(&mut global, &delta, &mut s).unwrap();
        assert_eq!(global.sub(&old), delta);
    }

    #[test]
    fn outer_step_zero_delta_fixed_point() {
        let mut global = ParamVector::new(vec![1.0, 2.0]);
        let mut s = NesterovState::new(2, &NesterovConfig::default());
        outer_step(&mut global, &ParamVector::zeros(2), &mut s).unwrap();
        assert_eq!(global.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn outer_step_two_nesterov_iterations() {
        let (lr, mu, d) = (0.7, 0.9, 0.2);
        let (mut theta, mut buf) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            let g = -d;
            buf = mu * buf + g;
            theta -= lr * (g + mu * buf);
        }
        // By hand: step 1 buf=-0.2, theta=1+0.7*0.38=1.266;
        // step 2 buf=-0.38, theta=1.266+0.7*(0.2+0.342)=1.6454
        assert!((theta - 1.6454).abs() < 1e-12);

        let mut global = ParamVector::new(vec![1.0]);
        let mut s = NesterovState::new(
            1,
            &NesterovConfig {
                outer_lr: lr,
                momentum: mu,
            },
        );
        for _ in 0..2 {
            outer_step(&mut global, &ParamVector::new(vec![d]), &mut s).unwrap();
        }
        assert!((global[0] - theta).abs() <= 1e-12 * theta.abs());
    }

    #[test]
    fn outer_step_length_mismatch() {
        let mut global = ParamVector::new(vec![1.0]);
        let mut s = NesterovState::new(2, &NesterovConfig::default());
        assert!(outer_step(&mut global, &ParamVector::zeros(1), &mut s).is_err());
    }

    #[test]
    fn schedule_warmup_then_cosine() {
        let s = LrSchedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            min_lr_ratio: 0.1,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-15);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-15);
        assert!((s.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((s.lr_at(110) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(500) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::constant(0.3).lr_at(1234), 0.3);
    }
}
