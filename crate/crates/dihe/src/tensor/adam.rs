//! Adam optimizer state and update.

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// A trainable tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Standard Adam update with bias correction, in place.
pub fn adam_step(param: &mut Parameter, grad: &Tensor<f32>, cfg: &AdamConfig) {
    assert_eq!(
        grad.shape(),
        param.value.shape(),
        "adam_step: gradient shape mismatch for {}",
        param.name
    );
    param.step += 1;
    let t = param.step as f32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let pm = param.m.data_mut();
    let pv = param.v.data_mut();
    let pw = param.value.data_mut();
    for i in 0..pw.len() {
        let g = grad.data()[i];
        pm[i] = b1 * pm[i] + (1.0 - b1) * g;
        pv[i] = b2 * pv[i] + (1.0 - b2) * g * g;
        let m_hat = pm[i] / bc1;
        let v_hat = pv[i] / bc2;
        pw[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference Adam, kept separate from the in-place implementation.
    fn reference_adam(g: &[f32], lr: f32, b1: f32, b2: f32, eps: f32) -> Vec<f32> {
        let mut w = 0.0f32;
        let mut m = 0.0f32;
        let mut v = 0.0f32;
        let mut trace = Vec::new();
        for (i, &gi) in g.iter().enumerate() {
            let t = (i + 1) as f32;
            m = b1 * m + (1.0 - b1) * gi;
            v = b2 * v + (1.0 - b2) * gi * gi;
            let m_hat = m / (1.0 - b1.powf(t));
            let v_hat = v / (1.0 - b2.powf(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
            trace.push(w);
        }
        trace
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Parameter::new("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]));
        let before = p.value.clone();
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut p, &Tensor::zeros(vec![3]), &cfg);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_matches_hand_evaluated_formula() {
        // From zero moments with gradient g, bias correction cancels and the
        // step is -lr * g / (|g| + eps').
        let g = 0.25f32;
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Parameter::new("w", Tensor::zeros(vec![1]));
        adam_step(&mut p, &Tensor::scalar(g), &cfg);
        let m_hat = g;
        let v_hat = g * g;
        let expected = -cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        assert!((p.value.item() - expected).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_matches_scalar_reference() {
        let grads = vec![0.5f32; 200];
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Parameter::new("w", Tensor::zeros(vec![1]));
        let mut trace = Vec::new();
        for &g in &grads {
            adam_step(&mut p, &Tensor::scalar(g), &cfg);
            trace.push(p.value.item());
        }
        let reference = reference_adam(&grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
        for (a, b) in trace.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
        // With a constant gradient each update magnitude stays near lr.
        let last_delta = (trace[199] - trace[198]).abs();
        assert!((last_delta - cfg.lr).abs() < 0.1 * cfg.lr, "delta {}", last_delta);
    }
}
