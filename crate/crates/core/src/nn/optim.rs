use serde::{Deserialize, Serialize};

use super::params::Parameters;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`. A NaN/Inf gradient aborts before any parameter moves.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut gs: Vec<(String, Vec<f64>)> = Vec::new();
        grads.visit("", &mut |n, t| gs.push((n.to_string(), t.data().to_vec())));
        if let Some((name, _)) = gs.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training(format!("non-finite gradient for parameter `{name}`")));
        }
        if self.first.is_empty() {
            self.first = gs.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != gs.len() {
            return Err(Error::shape("Adam::step tensors", self.first.len(), gs.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut idx = 0;
        let mut mismatch = None;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut("", &mut |name, p| {
            let g = &gs[idx].1;
            if g.len() != p.len() || first[idx].len() != p.len() {
                mismatch.get_or_insert_with(|| name.to_string());
                idx += 1;
                return;
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
        match mismatch {
            Some(name) => Err(Error::shape(format!("Adam::step `{name}`"), "matching grad", "mismatch")),
            None => Ok(()),
        }
    }

    /// Ascends along `grads` (used by the estimators that maximize a bound).
    pub fn ascend<P: Parameters + Clone>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut neg = grads.clone();
        neg.visit_mut("", &mut |_, t| t.scale(-1.0));
        self.step(params, &neg)
    }
}

/// Linear warm-up from 1/100 of the peak rate, then cosine decay to 1/100 of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub const START_FRACTION: f64 = 0.01;

    pub fn new(max_lr: f64, total_steps: u64, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_frac).round() as u64;
        Self {
            max_lr,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            max_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn rate(&self, step: u64) -> f64 {
        let floor = self.max_lr * Self::START_FRACTION;
        if self.total_steps == 0 {
            return self.max_lr;
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return floor + (self.max_lr - floor) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + 0.5 * (self.max_lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[derive(Clone)]
    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&crate::nn::params::join(p, "x"), &self.0)
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&crate::nn::params::join(p, "x"), &mut self.0)
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor::vector(vec![v]))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5);
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut p, &scalar(0.0)).unwrap();
        }
        assert_eq!(p.0.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction: Δ = 0.1 / (1 + 1e-8)
        let mut p = scalar(0.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &scalar(1.0)).unwrap();
        assert!((p.0.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_parabola() {
        // reference scalar loop, written out independently
        let (mut x, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = scalar(5.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let g = scalar(2.0 * p.0.data()[0]);
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p.0.data()[0] - x).abs() < 1e-12);
        assert!(x.abs() < 0.5, "x = {x}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar(1.0);
        let err = Adam::new(0.1).step(&mut p, &scalar(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(p.0.data()[0], 1.0);
    }

    #[test]
    fn schedule_warms_up_from_one_percent() {
        let s = LrSchedule::new(1.0, 100, 0.1);
        assert!((s.rate(0) - 0.01).abs() < 1e-12);
        assert!((s.rate(10) - 1.0).abs() < 1e-12);
        assert!(s.rate(55) < 1.0 && s.rate(55) > s.rate(90));
        assert!((s.rate(100) - 0.01).abs() < 1e-12);
    }
}
