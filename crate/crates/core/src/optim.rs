//! Adam with bias correction, and a cosine learning-rate schedule.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One descent step on `params` along `grad`. Each coordinate moves by at
/// most about `lr` for typical moment ratios.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, hyper: &AdamHyper) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let b1t = 1.0 - hyper.beta1.powf(state.step as f64);
    let b2t = 1.0 - hyper.beta2.powf(state.step as f64);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Cosine decay from `lr0` at iteration 0 to `floor` at `total`.
pub fn cosine_lr(iteration: usize, total: usize, lr0: f64, floor: f64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let frac = (iteration.min(total - 1) as f64) / (total - 1) as f64;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamHyper::default());
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign_with_bounded_steps() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let lr = 0.01;
        let mut prev = p.clone();
        for _ in 0..100 {
            adam_step(&mut p, &[3.0, -1e-3], &mut s, lr, &AdamHyper::default());
            for i in 0..2 {
                assert!((p[i] - prev[i]).abs() <= lr * (1.0 + 1e-6));
            }
            prev = p.clone();
        }
        assert!(p[0] < -0.9 && p[1] > 0.9);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01, 1e-6), 0.01);
        assert!((cosine_lr(99, 100, 0.01, 1e-6) - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(50, 101, 1.0, 0.0);
        assert!((mid - 0.5).abs() < 1e-12);
    }
}
