use super::{Ctx, Init};
use crate::tensor::{invalid, ParamId, Result, Tensor, Var};

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Post-activation gate values of one step.
#[derive(Clone, Copy, Debug)]
pub struct LstmGates {
    pub input: Var,
    pub forget: Var,
    pub cell: Var,
    pub output: Var,
}

impl LstmCell {
    pub fn new(init: &mut Init<'_>, input_size: usize, hidden_size: usize) -> Self {
        let g = 4 * hidden_size;
        Self {
            input_weight: init.uniform("input_weight", &[input_size, g], input_size),
            hidden_weight: init.uniform("hidden_weight", &[hidden_size, g], hidden_size),
            bias: init.uniform("bias", &[g], hidden_size),
            input_size,
            hidden_size,
        }
    }

    /// `x · W_x + b` for any number of leading positions at once.
    pub fn project(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.input_weight);
        let y = cx.tape.matmul(x, w)?;
        let b = cx.param(self.bias);
        cx.tape.add(y, b)
    }

    pub fn zero_state(&self, cx: &mut Ctx<'_>, batch: usize) -> (Var, Var) {
        let h = cx.constant(Tensor::zeros(&[batch, self.hidden_size]));
        let c = cx.constant(Tensor::zeros(&[batch, self.hidden_size]));
        (h, c)
    }

    /// One step from a pre-projected input `[B, 4H]`; returns `(h', c', gates)`.
    pub fn step_projected(&self, cx: &mut Ctx<'_>, projected: Var, h: Var, c: Var) -> Result<(Var, Var, LstmGates)> {
        let hs = self.hidden_size;
        let wh = cx.param(self.hidden_weight);
        let rec = cx.tape.matmul(h, wh)?;
        let pre = cx.tape.add(projected, rec)?;
        let mut chunk = |k: usize| cx.tape.slice(pre, 1, k * hs, hs);
        let (i, f, g, o) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?);
        let gates = LstmGates {
            input: cx.tape.sigmoid(i),
            forget: cx.tape.sigmoid(f),
            cell: cx.tape.tanh(g),
            output: cx.tape.sigmoid(o),
        };
        let keep = cx.tape.mul(gates.forget, c)?;
        let write = cx.tape.mul(gates.input, gates.cell)?;
        let c_next = cx.tape.add(keep, write)?;
        let squashed = cx.tape.tanh(c_next);
        let h_next = cx.tape.mul(gates.output, squashed)?;
        Ok((h_next, c_next, gates))
    }

    pub fn step(&self, cx: &mut Ctx<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var, LstmGates)> {
        let projected = self.project(cx, x)?;
        self.step_projected(cx, projected, h, c)
    }

    /// Runs over a `[τ, B, F]` sequence from a zero state, optionally in
    /// reverse time; outputs are returned in original time order.
    pub fn run(&self, cx: &mut Ctx<'_>, x: Var, reverse: bool) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size {
            return Err(invalid(
                "lstm",
                format!("expected [τ, B, {}], got {shape:?}", self.input_size),
            ));
        }
        let (tau, batch) = (shape[0], shape[1]);
        let projected = self.project(cx, x)?;
        let (mut h, mut c) = self.zero_state(cx, batch);
        let mut outputs = vec![None; tau];
        let order: Vec<usize> = if reverse { (0..tau).rev().collect() } else { (0..tau).collect() };
        for t in order {
            let p = cx.tape.slice(projected, 0, t, 1)?;
            let p = cx.tape.reshape(p, &[batch, 4 * self.hidden_size])?;
            let (hn, cn, _) = self.step_projected(cx, p, h, c)?;
            h = hn;
            c = cn;
            outputs[t] = Some(cx.tape.reshape(h, &[1, batch, self.hidden_size])?);
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every frame visited")).collect();
        cx.tape.concat(&outputs, 0)
    }
}

/// Output of a stacked LSTM over `[τ, B, F]`.
#[derive(Clone, Copy, Debug)]
pub struct StackOutput {
    /// Top-layer outputs; forward and backward halves concatenated when
    /// bidirectional.
    pub outputs: Var,
    /// Top-layer hidden states folded to the per-direction width
    /// (forward + backward).
    pub hidden: Var,
}

/// Multi-layer LSTM, bidirectional or unidirectional.
///
/// The unidirectional form uses twice the hidden size so its output width
/// matches the bidirectional one; its hidden summary folds the two halves
/// of that state together.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<Vec<LstmCell>>,
    pub hidden_size: usize,
    pub bidirectional: bool,
}

impl LstmStack {
    pub fn new(init: &mut Init<'_>, input_size: usize, hidden_size: usize, num_layers: usize, bidirectional: bool) -> Self {
        let out = 2 * hidden_size;
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { input_size } else { out };
                let mut scope = init.scope(&format!("layer{l}"));
                if bidirectional {
                    vec![
                        LstmCell::new(&mut scope.scope("fwd"), input, hidden_size),
                        LstmCell::new(&mut scope.scope("bwd"), input, hidden_size),
                    ]
                } else {
                    vec![LstmCell::new(&mut scope.scope("fwd"), input, out)]
                }
            })
            .collect();
        Self {
            layers,
            hidden_size,
            bidirectional,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<StackOutput> {
        let mut input = x;
        let mut last = (x, None);
        for layer in &self.layers {
            let fwd = layer[0].run(cx, input, false)?;
            if self.bidirectional {
                let bwd = layer[1].run(cx, input, true)?;
                input = cx.tape.concat(&[fwd, bwd], 2)?;
                last = (fwd, Some(bwd));
            } else {
                input = fwd;
                last = (fwd, None);
            }
        }
        let hs = self.hidden_size;
        let hidden = match last {
            (fwd, Some(bwd)) => cx.tape.add(fwd, bwd)?,
            (top, None) => {
                let a = cx.tape.slice(top, 2, 0, hs)?;
                let b = cx.tape.slice(top, 2, hs, hs)?;
                cx.tape.add(a, b)?
            }
        };
        Ok(StackOutput { outputs: input, hidden })
    }
}
