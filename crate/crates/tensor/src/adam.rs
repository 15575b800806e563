use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment buffers.
///
/// `lr` is read at every step, so schedules just assign to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. `grads[i] = None` means parameter `i` received no gradient
    /// this step, which is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::dim(
                "adam_step",
                format!("{} parameters vs {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::dim(
                "adam_step",
                format!(
                    "state for {} parameters, got {}",
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let expected = self.m[i].shape();
            if p.shape() != expected || g.is_some_and(|g| g.shape() != expected) {
                return Err(TensorError::dim(
                    "adam_step",
                    format!(
                        "parameter {i}: {:?} vs state {expected:?} / grad {:?}",
                        p.shape(),
                        g.map(|g| g.shape())
                    ),
                ));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let gd = g.map(|g| g.data());
            for j in 0..p.len() {
                let gj = gd.map_or(0.0, |g| g[j]);
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = m.data()[j] / bc1;
                let v_hat = v.data()[j] / bc2;
                p.data_mut()[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
