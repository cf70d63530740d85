use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One Adam update, in place.
///
/// Uses the folded bias correction `lr_t = lr·√(1−β2ᵗ)/(1−β1ᵗ)` with `eps`
/// added to the uncorrected `√v`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(mismatch("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(mismatch("adam_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(mismatch("adam_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr_t = cfg.lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *w -= lr_t * *mi / (vi.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam optimizer bundling its configuration and state.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[Tensor::vector(vec![0.0, 0.0])], &mut st, &cfg).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut st = AdamState {
            step: 1,
            m: vec![vec![0.2]],
            v: vec![vec![0.04]],
        };
        let mut q = Tensor::vector(vec![0.0]);
        adam_step(&mut [&mut q], &[Tensor::vector(vec![0.0])], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.9 * 0.2).abs() < 1e-15);
        assert!((st.v[0][0] - 0.999 * 0.04).abs() < 1e-15);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let g = [0.3, -4.0, 1e-3];
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[Tensor::vector(g.to_vec())], &mut st, &cfg).unwrap();
        let scale = cfg.lr * (1.0 - cfg.beta2).sqrt() / (1.0 - cfg.beta1);
        for (w, gi) in p.data().iter().zip(g) {
            let m = (1.0 - cfg.beta1) * gi;
            let v = (1.0 - cfg.beta2) * gi * gi;
            let expect = -scale * m / (v.sqrt() + cfg.eps);
            assert!((w - expect).abs() < 1e-15);
            // Direction is the sign of the gradient, magnitude ≈ lr.
            assert!((w.abs() - cfg.lr).abs() < 1e-4);
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w − 3)², 100 steps at lr 0.1 from 0.
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut w = Tensor::vector(vec![0.0]);
        let mut st = AdamState::default();
        for _ in 0..100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            adam_step(&mut [&mut w], &[Tensor::vector(vec![g])], &mut st, &cfg).unwrap();
        }
        // Independent scalar recursion of the same update.
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8 / (1.0 - 0.999f64.powi(t)).sqrt());
        }
        assert!((w.data()[0] - x).abs() < 1e-9);
        assert!((w.data()[0] - 3.0).abs() < 0.2);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0; 2]);
        let mut st = AdamState::default();
        let r = adam_step(&mut [&mut p], &[Tensor::vector(vec![0.0; 3])], &mut st, &AdamConfig::default());
        assert!(r.is_err());
    }
}
