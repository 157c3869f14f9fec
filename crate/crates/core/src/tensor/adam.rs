use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers, indexed like the [`ParamStore`] they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Option<Tensor>>,
    pub second: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let moments = || {
            params
                .iter()
                .map(|(_, p)| p.requires_grad.then(|| Tensor::zeros(p.value.shape())))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`, then zeroes grads.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = params.trainable().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id);
            let g = p.grad.as_mut().expect("checked above");
            let m = self.first[i].as_mut().expect("moment for trainable param");
            let v = self.second[i].as_mut().expect("moment for trainable param");
            let w = p.value.data_mut();
            let gd = g.data_mut();
            for j in 0..w.len() {
                let gj = gd[j];
                let mj = &mut m.data_mut()[j];
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                let mhat = *mj / bc1;
                let vj = &mut v.data_mut()[j];
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let vhat = *vj / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + epsilon);
                gd[j] = 0.0;
            }
        }
        Ok(())
    }
}
