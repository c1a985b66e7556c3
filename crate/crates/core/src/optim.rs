//! AdamW with decoupled weight decay, warmup + cosine schedule, gradient
//! clipping and stochastic weight averaging, all over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update in place. Decay `w -= lr * wd * w` is applied before and
/// independently of the adaptive step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "adamw_step",
            format!("params {n}, grads {}, moments {}", grads.len(), state.m.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        if cfg.weight_decay != 0.0 {
            params[i] *= decay;
        }
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Scales `grads` so that its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = crate::tensor::l2_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// `lr_min = lr_peak / 100`.
    pub fn new(lr_peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            lr_peak,
            lr_min: lr_peak / 100.0,
            warmup_steps,
            total_steps,
        }
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_min` at
/// `total_steps` (held there afterwards).
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr_peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.lr_min;
    }
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwaState {
    pub avg: Vec<f64>,
    pub n_models: u64,
}

impl SwaState {
    pub fn new(n: usize) -> Self {
        Self {
            avg: vec![0.0; n],
            n_models: 0,
        }
    }

    /// Running mean `avg <- (avg * n + w) / (n + 1)`, written incrementally.
    pub fn update(&mut self, snapshot: &[f64]) -> Result<()> {
        if snapshot.len() != self.avg.len() {
            return Err(Error::shape(
                "swa_update",
                format!("snapshot {} vs average {}", snapshot.len(), self.avg.len()),
            ));
        }
        let k = 1.0 / (self.n_models + 1) as f64;
        for (a, &w) in self.avg.iter_mut().zip(snapshot) {
            *a += (w - *a) * k;
        }
        self.n_models += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = AdamConfig {
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        let w0 = vec![1.0, -2.5, 3.75];
        let mut w = w0.clone();
        let mut st = AdamState::new(3);
        adamw_step(&mut w, &[0.0; 3], &mut st, 0.1, &cfg).unwrap();
        for (a, b) in w.iter().zip(&w0) {
            assert_eq!(*a, b * (1.0 - 0.1 * 1e-4));
            assert!((a - b * (1.0 - 1e-5)).abs() <= f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let w0 = vec![0.3, -0.7];
        let mut w = w0.clone();
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adamw_step(&mut w, &[0.0; 2], &mut st, 0.5, &cfg).unwrap();
        }
        assert_eq!(w, w0);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = vec![0.0; 3];
        let g = [0.5, -2.0, 1e-3];
        let mut st = AdamState::new(3);
        adamw_step(&mut w, &g, &mut st, 0.01, &cfg).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            let expect = -0.01 * gi.abs() / (gi.abs() + 1e-8) * gi.signum();
            assert!((wi - expect).abs() < 1e-15, "{wi} vs {expect}");
        }
    }

    /// Plain Adam written out independently.
    fn adam_oracle(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
        for i in 0..w.len() {
            m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
            v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }

    #[test]
    fn adamw_without_decay_equals_adam() {
        let mut rng = Rng::new(1);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let mut w2 = w.clone();
        let (mut m, mut v) = (vec![0.0; 10], vec![0.0; 10]);
        let mut st = AdamState::new(10);
        for t in 1..=20 {
            let g: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            adamw_step(&mut w, &g, &mut st, 0.01, &cfg).unwrap();
            adam_oracle(&mut w2, &g, &mut m, &mut v, t, 0.01);
        }
        assert_eq!(w, w2);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut st = AdamState::new(2);
        let mut w = vec![0.0; 2];
        let cfg = AdamConfig::default();
        assert!(adamw_step(&mut w, &[f64::NAN, 0.0], &mut st, 0.1, &cfg).is_err());
        assert!(adamw_step(&mut w, &[0.0], &mut st, 0.1, &cfg).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(2e-4, 50, 300);
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(50, &s), 2e-4);
        assert!((lr_at(49, &s) - 2e-4 * 49.0 / 50.0).abs() < 1e-20);
        assert!((lr_at(300, &s) - 2e-6).abs() < 1e-18);
        assert!((lr_at(10_000, &s) - 2e-6).abs() < 1e-18);
        // continuity at the junction
        assert!((lr_at(50, &s) - s.lr_peak).abs() < 1e-18);
        assert!((lr_at(51, &s) - s.lr_peak).abs() < 1e-8);
        assert!((lr_at(49, &s) - s.lr_peak).abs() < 1e-5);
        let mid = lr_at(175, &s);
        assert!((mid - (2e-6 + 0.5 * (2e-4 - 2e-6))).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = Schedule::new(1e-3, 10, 200);
        let lrs: Vec<f64> = (0..=200).map(|t| lr_at(t, &s)).collect();
        assert!(lrs[..=10].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn swa_examples() {
        let w1 = vec![1.0, -2.0, 0.5];
        let mut s = SwaState::new(3);
        s.update(&w1).unwrap();
        assert_eq!(s.avg, w1);
        for _ in 0..6 {
            s.update(&w1).unwrap();
        }
        assert_eq!(s.avg, w1);
        assert_eq!(s.n_models, 7);

        let mut s = SwaState::new(2);
        s.update(&[1.0, 4.0]).unwrap();
        s.update(&[3.0, -2.0]).unwrap();
        assert_eq!(s.avg, vec![2.0, 1.0]);
        assert!(s.update(&[1.0]).is_err());
    }

    #[test]
    fn swa_matches_brute_force_mean() {
        let mut rng = Rng::new(2);
        let snaps: Vec<Vec<f64>> = (0..37).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let mut s = SwaState::new(8);
        for w in &snaps {
            s.update(w).unwrap();
        }
        for i in 0..8 {
            let mean = snaps.iter().map(|w| w[i]).sum::<f64>() / snaps.len() as f64;
            assert!((s.avg[i] - mean).abs() < 1e-12);
        }
    }
}
