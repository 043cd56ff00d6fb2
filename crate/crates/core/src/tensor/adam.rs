//! Adam optimizer with bias correction.

use super::{Tensor, TensorError};

/// Per-parameter first/second moment accumulators plus the step counter.
/// The moment layout follows the parameter list order, which must be stable
/// across steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over the parameter list. Gradients are read from each
    /// tensor's `grad` slot; parameters without one are an error.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), TensorError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("state tracks {} parameters, got {}", self.m.len(), params.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let n = p.numel();
            if self.m[idx].len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.m[idx].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let grad = p
                .grad()
                .ok_or(TensorError::Invalid {
                    op: "adam_step",
                    msg: "parameter has no gradient".into(),
                })?
                .to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        p.set_grad(vec![0.0; 3]).unwrap();
        let before = p.data().to_vec();
        let mut state = AdamState::new(0.001);
        state.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &before[..]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // hand-rolled recurrence: m=0.1g, v=0.001g^2, m_hat=g, v_hat=g^2,
        // delta = lr * g / (|g| + eps) ~= lr for g = 1
        let mut p = Tensor::from_vec(vec![1], vec![0.7]).unwrap();
        p.set_grad(vec![1.0]).unwrap();
        let mut state = AdamState::new(0.001);
        state.step(&mut [&mut p]).unwrap();
        let delta = 0.7 - p.data()[0];
        assert!((delta - 0.001).abs() < 1e-8, "delta = {delta}");
    }

    #[test]
    fn matches_hand_rolled_recurrence_over_steps() {
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let grads = [0.5, -1.25, 2.0, 0.0, 0.75];

        let mut p = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let mut state = AdamState::new(lr);

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            p.set_grad(vec![g]).unwrap();
            state.step(&mut [&mut p]).unwrap();

            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p.data()[0] - x).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut a = Tensor::from_vec(vec![2], vec![0.3, -0.4]).unwrap();
        let mut b = a.clone();
        let mut sa = AdamState::new(0.005);
        let mut sb = AdamState::new(0.005);
        for step in 0..5 {
            let g = vec![0.1 * (step as f64 + 1.0), -0.2];
            a.set_grad(g.clone()).unwrap();
            b.set_grad(g).unwrap();
            sa.step(&mut [&mut a]).unwrap();
            sb.step(&mut [&mut b]).unwrap();
        }
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::zeros(vec![2]);
        let mut state = AdamState::new(0.001);
        assert!(state.step(&mut [&mut p]).is_err());
    }
}
