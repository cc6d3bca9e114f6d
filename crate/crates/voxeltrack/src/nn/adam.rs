//! Adam optimizer over flat parameter slices.

/// Hyper-parameters; the defaults are the usual ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update. `t` is the 1-based step count (shared by all tensors
/// of the model).
///
/// m_t = b1 m + (1-b1) g;  v_t = b2 v + (1-b2) g^2;
/// p -= lr * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + eps)
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let b1c = 1.0 - cfg.beta1.powi(t as i32);
    let b2c = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / b1c;
        let v_hat = state.v[i] / b2c;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut st = AdamState::new(3);
        let cfg = AdamConfig::default();
        for t in 1..=5 {
            adam_step(&mut p, &[0.0; 3], &mut st, &cfg, t);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut prev = p[0];
        let mut last_delta = 0.0;
        for t in 1..=2000 {
            adam_step(&mut p, &[3.0], &mut st, &cfg, t);
            last_delta = p[0] - prev;
            prev = p[0];
        }
        // For a constant positive gradient the update settles at -lr.
        assert!(
            (last_delta + cfg.lr).abs() < 1e-3,
            "delta {last_delta} vs {}",
            -cfg.lr
        );
    }

    /// Scalar reference implementation, written straight from the update
    /// equations, to pin the vectorized version.
    #[test]
    fn matches_scalar_simulation() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let grads = [0.5, -1.2, 0.05, 2.0, -0.3];
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);

        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 1.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as u64;
            adam_step(&mut p, &[g], &mut st, &cfg, t);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            q -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            assert!((p[0] - q).abs() < 1e-15, "step {t}: {} vs {q}", p[0]);
        }
    }
}
