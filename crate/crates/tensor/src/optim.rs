use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

/// Hyperparameters of Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

impl AdamW {
    /// Applies one update to each listed parameter. Gradients are left in
    /// place; the caller clears them.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(TensorError::MissingGrad(store.get(id).name.clone()));
        }
        let precision = store.precision();
        let (b1, b2) = self.betas;
        for &id in ids {
            let p = store.get_mut(id);
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let grad = p.grad.as_ref().expect("checked above");
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                let m = precision.round(b1 * p.exp_avg[i] + (1.0 - b1) * g);
                let v = precision.round(b2 * p.exp_avg_sq[i] + (1.0 - b2) * g * g);
                p.exp_avg[i] = m;
                p.exp_avg_sq[i] = v;
                let update = (m / c1) / ((v / c2).sqrt() + self.eps);
                let theta = values[i];
                values[i] = precision.round(theta - self.lr * self.weight_decay * theta - self.lr * update);
            }
        }
        Ok(())
    }
}
