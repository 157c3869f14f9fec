use super::{Ctx, Init, Mode};
use crate::tensor::{ParamId, Result, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over every leading position of a `[M, C]` input,
/// one statistic per channel, with a learned affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Self {
        Self {
            gamma: init.constant("gamma", &[channels], 1.0, true),
            beta: init.constant("beta", &[channels], 0.0, true),
            running_mean: init.constant("running_mean", &[channels], 0.0, false),
            running_var: init.constant("running_var", &[channels], 1.0, false),
            channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let normalized = match cx.mode() {
            Mode::Train => {
                let (y, stats) = cx.tape.batchnorm(x, BN_EPS)?;
                let params = cx.params();
                let m = stats.count as f64;
                let unbiased = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
                let mean: Vec<f64> = params
                    .value(self.running_mean)
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(r, s)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * s)
                    .collect();
                let var: Vec<f64> = params
                    .value(self.running_var)
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(r, s)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * s * unbiased)
                    .collect();
                cx.queue_running_update(self.running_mean, mean);
                cx.queue_running_update(self.running_var, var);
                y
            }
            Mode::Eval => {
                let params = cx.params();
                let shift = params.value(self.running_mean).map(|m| -m);
                let scale = params.value(self.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt());
                let shift = cx.constant(shift);
                let scale = cx.constant(scale);
                let centered = cx.tape.add(x, shift)?;
                cx.tape.mul(centered, scale)?
            }
        };
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let scaled = cx.tape.mul(normalized, gamma)?;
        cx.tape.add(scaled, beta)
    }

    pub fn running_stats<'p>(&self, params: &'p crate::tensor::ParamStore) -> (&'p Tensor, &'p Tensor) {
        (params.value(self.running_mean), params.value(self.running_var))
    }
}
