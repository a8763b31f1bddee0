//! First-order parameter updates over flat `f64` buffers.

/// Gradient descent with decoupled weight decay:
/// `p <- p * (1 - lr * wd) - lr * g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayedSgd {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl DecayedSgd {
    pub fn step(&self, params: &mut [f64], grads: &[f64]) {
        let keep = 1.0 - self.learning_rate * self.weight_decay;
        for (p, g) in params.iter_mut().zip(grads) {
            *p = *p * keep - self.learning_rate * g;
        }
    }
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before updating the individual parameter groups.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Updates parameter group `slot`. Moment buffers are created lazily.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        if self.m.len() <= slot {
            self.m.resize_with(slot + 1, Vec::new);
            self.v.resize_with(slot + 1, Vec::new);
        }
        if self.m[slot].len() != params.len() {
            self.m[slot] = vec![0.0; params.len()];
            self.v[slot] = vec![0.0; params.len()];
        }
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let keep = 1.0 - self.learning_rate * self.weight_decay;
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] = params[i] * keep - self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
