use super::{Ctx, Init};
use crate::tensor::{ParamId, Result, Var};

/// `y = x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = init.uniform("weight", &[in_features, out_features], in_features);
        let bias = bias.then(|| init.uniform("bias", &[out_features], in_features));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let y = cx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.param(b);
                cx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}
