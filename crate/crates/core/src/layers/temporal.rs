use super::{Ctx, Init};
use crate::tensor::{invalid, ParamId, Result, Tensor, Var};

/// Hidden width of the time-mixing convolutions.
pub const TC_HIDDEN: usize = 64;

/// `ReLU(W2 · ReLU(W1 · X))` mixing the leading time axis with 1×1
/// kernels: `W1` is `hidden × τ`, `W2` is `τ × hidden`, shared by every
/// position on the remaining axes.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub expand: ParamId,
    pub contract: ParamId,
    pub tau: usize,
    pub hidden: usize,
}

impl TemporalConv {
    pub fn new(init: &mut Init<'_>, tau: usize, hidden: usize) -> Self {
        Self {
            expand: init.uniform("expand", &[hidden, tau], tau),
            contract: init.uniform("contract", &[tau, hidden], hidden),
            tau,
            hidden,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.first() != Some(&self.tau) {
            return Err(invalid(
                "temporal_conv",
                format!("expected time length {}, got shape {shape:?}", self.tau),
            ));
        }
        let rest: usize = shape[1..].iter().product();
        let flat = cx.tape.reshape(x, &[self.tau, rest])?;
        let w1 = cx.param(self.expand);
        let h = cx.tape.matmul(w1, flat)?;
        let h = cx.tape.relu(h);
        let w2 = cx.param(self.contract);
        let y = cx.tape.matmul(w2, h)?;
        let y = cx.tape.relu(y);
        cx.tape.reshape(y, &shape)
    }
}

/// Temporal convolution with an identity skip.
#[derive(Clone, Debug)]
pub struct ResCnn {
    pub conv: TemporalConv,
}

impl ResCnn {
    pub fn new(init: &mut Init<'_>, tau: usize, hidden: usize) -> Self {
        Self {
            conv: TemporalConv::new(init, tau, hidden),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        cx.tape.add(y, x)
    }
}

/// Convolution along time with kernel 3 and zero "same" padding over a
/// `[τ, B, C_in]` input, followed by ReLU.
#[derive(Clone, Debug)]
pub struct FrameConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

const KERNEL: usize = 3;

impl FrameConv {
    pub fn new(init: &mut Init<'_>, in_channels: usize, out_channels: usize) -> Self {
        let fan_in = KERNEL * in_channels;
        Self {
            weight: init.uniform("weight", &[fan_in, out_channels], fan_in),
            bias: init.uniform("bias", &[out_channels], fan_in),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(invalid(
                "frame_conv",
                format!("expected [τ, B, {}], got {shape:?}", self.in_channels),
            ));
        }
        let (tau, batch) = (shape[0], shape[1]);
        let pad = cx.constant(Tensor::zeros(&[1, batch, self.in_channels]));
        let padded = cx.tape.concat(&[pad, x, pad], 0)?;
        let taps: Vec<Var> = (0..KERNEL)
            .map(|k| cx.tape.slice(padded, 0, k, tau))
            .collect::<Result<_>>()?;
        let stacked = cx.tape.concat(&taps, 2)?;
        let w = cx.param(self.weight);
        let y = cx.tape.matmul(stacked, w)?;
        let b = cx.param(self.bias);
        let y = cx.tape.add(y, b)?;
        Ok(cx.tape.relu(y))
    }
}
