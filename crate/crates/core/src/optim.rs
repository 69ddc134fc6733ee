//! Adam with a cosine warm-up learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear warm-up to `peak` over the first `warmup_fraction` of training,
/// then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl CosineWarmup {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_fraction * total).round();
        let s = step as f64;
        if s < warm {
            return self.peak * (s + 1.0) / warm;
        }
        let span = (total - warm).max(1.0);
        let progress = ((s - warm) / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn zero_rate_leaves_parameters_untouched() {
        let mut p = vec![1.5, -0.25, 0.0];
        let before = p.clone();
        let mut opt = Adam::new(3);
        opt.step(&mut p, &[1.0, -3.0, 7.0], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineWarmup {
            peak: 1e-3,
            warmup_fraction: 0.1,
            total_steps: 100,
        };
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(9) - 1e-3).abs() < 1e-12);
        assert!((s.lr(10) - 1e-3).abs() < 1e-12);
        assert!(s.lr(50) < 1e-3 && s.lr(50) > s.lr(90));
        assert!(s.lr(100) < 1e-12);
    }
}
