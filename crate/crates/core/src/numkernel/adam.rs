//! Adam optimizer state over a flat parameter slice.

/// First and second moment estimates for one parameter tensor.
///
/// The state is plain `f32` and the update order is fixed, so two runs fed
/// identical gradients produce bitwise-identical parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    /// Step counter; shared across tensors by calling [`Adam::step`] once
    /// per optimizer step on each tensor.
    t: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1,
            beta2,
            eps,
            t: 0,
        }
    }

    /// One update of `params` from `grads` at learning rate `lr`.
    ///
    /// Panics on length mismatch; optimizer state is created from the
    /// parameter tensor it serves, so a mismatch is a programming error.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), self.m.len(), "adam state length");
        assert_eq!(grads.len(), self.m.len(), "adam gradient length");
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - (b1 as f64).powi(self.t as i32);
        let bias2 = 1.0 - (b2 as f64).powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] as f64 / bias1;
            let v_hat = self.v[i] as f64 / bias2;
            params[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
        }
    }
}
