//! AdamW with decoupled weight decay and a linear-warmup / cosine-decay
//! learning-rate schedule. Normalization parameters and biases carry
//! `decay: false` in the registry and are exempt from weight decay.

use crate::nn::ParamEntry;
use ndarray::ArrayD;

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    moments: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: vec![None; n_params],
        }
    }

    /// Applies one update using the gradients accumulated on each entry,
    /// then clears them. Entries without a gradient are skipped (frozen or
    /// unused parameters).
    pub fn step(&mut self, params: &[ParamEntry], lr: f64) {
        assert_eq!(params.len(), self.moments.len());
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in params.iter().enumerate() {
            let Some(grad) = entry.tensor.grad() else {
                continue;
            };
            let data = entry.tensor.data();
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                (
                    ArrayD::zeros(data.raw_dim()),
                    ArrayD::zeros(data.raw_dim()),
                )
            });
            *m = &*m * self.beta1 + &grad * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(&grad * &grad) * (1.0 - self.beta2);
            let mut update = ArrayD::zeros(data.raw_dim());
            ndarray::Zip::from(&mut update)
                .and(&*m)
                .and(&*v)
                .for_each(|u, &mi, &vi| {
                    *u = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                });
            let wd = if entry.decay { self.weight_decay } else { 0.0 };
            let new = &data - &(&update + &(&data * wd)) * lr;
            entry.tensor.set_data(new);
            entry.tensor.zero_grad();
        }
    }
}

/// Linear warm-up to `peak_lr` over `warmup_steps`, then cosine decay to
/// zero at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.peak_lr;
        }
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
