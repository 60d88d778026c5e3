//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

/// Momentum SGD with coupled weight decay (`g + wd·w`), one buffer per
/// parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32, sizes: &[usize]) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, i: usize, w: &mut [f32], g: &[f32], lr: f32) {
        let buf = &mut self.buffers[i];
        for ((w, g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
            let d = g + self.weight_decay * *w;
            *b = self.momentum * *b + d;
            *w -= lr * *b;
        }
    }
}

/// Adam with coupled weight decay, one moment pair per tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, weight_decay: f32, sizes: &[usize]) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating the tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, i: usize, w: &mut [f32], g: &[f32], lr: f32) {
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for k in 0..w.len() {
            let gk = g[k] + self.weight_decay * w[k];
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
            let denom = (v[k] / bc2).sqrt() + self.eps;
            w[k] -= lr * (m[k] / bc1) / denom;
        }
    }
}

/// `min + (max − min)·(1 + cos(π·epoch/epochs))/2`.
pub fn cosine_lr(max: f64, min: f64, epoch: u64, epochs: u64) -> f64 {
    if epochs == 0 {
        return max;
    }
    let t = (epoch.min(epochs)) as f64 / epochs as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales gradients so their global l2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_computation() {
        let mut opt = Sgd::new(0.9, 0.1, &[1]);
        let mut w = [1.0f32];
        opt.step(0, &mut w, &[0.5], 0.1);
        // d = 0.5 + 0.1 = 0.6, buf = 0.6, w = 1 - 0.06
        assert!((w[0] - 0.94).abs() < 1e-7);
        opt.step(0, &mut w, &[0.5], 0.1);
        // d = 0.594, buf = 0.54 + 0.594
        assert!((w[0] - (0.94 - 0.1 * 1.134)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut opt = Adam::new(0.5, 0.999, 0.0, &[2]);
        let mut w = [0.0f32, 0.0];
        opt.begin_step();
        opt.update(0, &mut w, &[3.0, -0.01], 0.1);
        assert!((w[0] + 0.1).abs() < 1e-5);
        assert!((w[1] - 0.1).abs() < 1e-3);
    }

    #[test]
    fn cosine_endpoints_and_clipping() {
        assert!((cosine_lr(0.025, 0.001, 0, 10) - 0.025).abs() < 1e-12);
        assert!((cosine_lr(0.025, 0.001, 10, 10) - 0.001).abs() < 1e-12);
        assert!((cosine_lr(0.025, 0.001, 5, 10) - 0.013).abs() < 1e-12);
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-5);
    }
}
