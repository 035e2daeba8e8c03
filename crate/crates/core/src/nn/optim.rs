//! AdamW with a warmup + linear-decay schedule.

/// Learning-rate schedule: linear warmup to the peak, then linear decay to
/// zero at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak_lr;
        }
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps.max(1) as f64;
        }
        let decay_span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let done = (step - self.warmup_steps) as f64;
        self.peak_lr * (1.0 - done / decay_span).max(0.0)
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One update. `decay_mask[i]` selects which parameters receive weight
    /// decay (biases and norm gains conventionally do not).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay_mask: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(decay_mask.len(), self.m.len());
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            if decay_mask[i] {
                params[i] -= lr * self.weight_decay * params[i];
            }
        }
    }
}
