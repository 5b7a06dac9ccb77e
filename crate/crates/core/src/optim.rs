//! Adaptive moment estimation for network parameters.

use crate::backbones::Network;
use crate::tensor::Tensor;

/// Adam with bias correction. State is keyed by parameter order, which is
/// stable for a given architecture.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Decoupled weight decay applied alongside the adaptive update.
    pub fn with_weight_decay(mut self, weight_decay: f32) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Apply one update. `grads[i]` is the gradient of parameter `i`;
    /// frozen parameters are left untouched.
    pub fn step(&mut self, net: &mut Network, grads: &[&Tensor]) {
        let params = net.params_mut();
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let g = grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((w, (&gi, mi)), vi) in
                p.value.data_mut().iter_mut().zip(g.iter().zip(m.iter_mut())).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}
