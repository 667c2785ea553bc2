//! SGD with momentum and the cosine learning-rate schedule.

use std::collections::BTreeMap;

/// Cosine annealing from `lr0` at step 0 to `lr0 * final_ratio` at the last
/// of `total` steps.
pub fn cosine_lr(lr0: f64, final_ratio: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let lr_min = lr0 * final_ratio;
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Heavy-ball momentum: `v = m v + g`, `p -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Update `param` in place from `grad`, with L2 weight decay folded into
    /// the gradient.
    pub fn step(&mut self, key: &str, param: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0.01, 0, 50), 0.1);
        assert!((cosine_lr(0.1, 0.01, 49, 50) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 1, 3) - 0.5).abs() < 1e-15);
        for s in 1..50 {
            assert!(cosine_lr(0.1, 0.01, s, 50) <= cosine_lr(0.1, 0.01, s - 1, 50));
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut o = Sgd::new(0.9);
        let mut p = [1.0];
        o.step("w", &mut p, &[1.0], 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        o.step("w", &mut p, &[1.0], 0.1, 0.0);
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
    }
}
