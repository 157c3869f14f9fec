//! Autoregressive LSTM decoder that predicts per-frame displacements and
//! integrates them into future poses.

use rand::Rng as _;

use crate::encoder::HIDDEN_PER_JOINT;
use crate::layers::{Ctx, Init, Linear, LstmCell};
use crate::rng::Rng;
use crate::tensor::{invalid, Result, Tensor, Var};

pub const TF_DECAY: f64 = 0.995;

/// Probability of feeding ground truth, `p0 · decay^epoch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherForcingSchedule {
    pub p0: f64,
    pub decay: f64,
}

impl Default for TeacherForcingSchedule {
    fn default() -> Self {
        Self {
            p0: 1.0,
            decay: TF_DECAY,
        }
    }
}

impl TeacherForcingSchedule {
    pub fn new(decay: f64) -> Self {
        Self { p0: 1.0, decay }
    }

    pub fn p(&self, epoch: usize) -> f64 {
        self.p0 * self.decay.powi(epoch as i32)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    /// `[B, 3N]`, the most recent pose (observed or predicted).
    pub last_pose: Var,
    /// `[B, 3N]`, the displacement consumed by the next step.
    pub next_input: Var,
    pub step: usize,
}

/// How inputs after the first step are chosen.
pub enum DecodeMode<'a> {
    /// Always feed the model's own displacement.
    Inference,
    /// Per step and sample, feed the ground-truth displacement with
    /// probability `p`. `truth` is `[horizon, B, N, 3]`.
    Training { p: f64, truth: &'a Tensor, rng: &'a mut Rng },
}

#[derive(Clone, Debug)]
pub struct MotionDecoder {
    pub init_h: Linear,
    pub init_c: Linear,
    pub cell: LstmCell,
    pub out: Linear,
    pub n_joints: usize,
}

impl MotionDecoder {
    pub fn new(init: &mut Init<'_>, n_joints: usize) -> Self {
        let (d, h) = (3 * n_joints, HIDDEN_PER_JOINT * n_joints);
        Self {
            init_h: Linear::new(&mut init.scope("init_h"), d, h, true),
            init_c: Linear::new(&mut init.scope("init_c"), d, h, true),
            cell: LstmCell::new(&mut init.scope("lstm"), d, h),
            out: Linear::new(&mut init.scope("out"), h, d, true),
            n_joints,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.cell.hidden_size
    }

    /// Context from the time-mean of `p` (`[τ, B, N, 3]`); the first input is
    /// the displacement between the last two frames of `p`.
    pub fn init_state(&self, cx: &mut Ctx<'_>, p: Var, x_last: Var) -> Result<DecoderState> {
        let shape = cx.tape.shape(p).to_vec();
        let d = 3 * self.n_joints;
        if shape.len() != 4 || shape[2] * shape[3] != d {
            return Err(invalid("init_decoder", format!("expected [τ, B, {}, 3], got {shape:?}", self.n_joints)));
        }
        if shape[0] < 2 {
            return Err(invalid("init_decoder", "feature map needs at least 2 frames"));
        }
        let (tau, batch) = (shape[0], shape[1]);
        let flat = cx.tape.reshape(p, &[tau, batch, d])?;
        let context = cx.tape.mean_axis(flat, 0, false)?;
        let h = self.init_h.forward(cx, context)?;
        let c = self.init_c.forward(cx, context)?;
        let last = cx.tape.slice(flat, 0, tau - 1, 1)?;
        let before = cx.tape.slice(flat, 0, tau - 2, 1)?;
        let delta = cx.tape.sub(last, before)?;
        let next_input = cx.tape.reshape(delta, &[batch, d])?;
        let last_pose = cx.tape.reshape(x_last, &[batch, d])?;
        Ok(DecoderState {
            h,
            c,
            last_pose,
            next_input,
            step: 0,
        })
    }

    /// One step: returns the new pose `[B, 3N]`, the predicted displacement
    /// and the advanced state (whose next input is that displacement).
    pub fn step(&self, cx: &mut Ctx<'_>, state: &DecoderState) -> Result<(Var, Var, DecoderState)> {
        let (h, c, _) = self.cell.step(cx, state.next_input, state.h, state.c)?;
        let delta = self.out.forward(cx, h)?;
        let pose = cx.tape.add(state.last_pose, delta)?;
        let next = DecoderState {
            h,
            c,
            last_pose: pose,
            next_input: delta,
            step: state.step + 1,
        };
        Ok((pose, delta, next))
    }

    /// Runs `steps` steps from `state`; returns poses `[steps, B, N, 3]`.
    ///
    /// Training mode must start from a fresh state; `truth[k]` is the target
    /// of step `k` and ground-truth displacements are differences of
    /// consecutive targets (the first relative to the last observed pose).
    pub fn run(&self, cx: &mut Ctx<'_>, mut state: DecoderState, steps: usize, mut mode: DecodeMode<'_>) -> Result<(Var, DecoderState)> {
        if steps == 0 {
            return Err(invalid("predict", "horizon must be at least 1"));
        }
        let d = 3 * self.n_joints;
        let batch = cx.tape.shape(state.last_pose)[0];
        let truth = match &mode {
            DecodeMode::Training { truth, .. } => {
                if state.step != 0 {
                    return Err(invalid("predict", "teacher forcing needs a freshly initialized state"));
                }
                if truth.shape().len() != 4 || truth.shape()[1..] != [batch, self.n_joints, 3] || truth.shape()[0] < steps {
                    return Err(invalid(
                        "predict",
                        format!("ground truth shape {:?} does not cover {steps} steps", truth.shape()),
                    ));
                }
                Some(cx.tape.value(state.last_pose).clone())
            }
            DecodeMode::Inference => None,
        };
        let mut prev_truth = truth;
        let mut poses = Vec::with_capacity(steps);
        for k in 0..steps {
            if k > 0 {
                if let DecodeMode::Training { p, truth, rng } = &mut mode {
                    let frame = state.step - 1;
                    let cur = &truth.data()[frame * batch * d..(frame + 1) * batch * d];
                    let prev = prev_truth.as_ref().expect("training mode").data();
                    let coins: Vec<bool> = (0..batch).map(|_| rng.gen::<f64>() < *p).collect();
                    if coins.iter().any(|&c| c) {
                        let gt = Tensor::from_fn(&[batch, d], |i| cur[i] - prev[i]);
                        let gt = cx.constant(gt);
                        state.next_input = if coins.iter().all(|&c| c) {
                            gt
                        } else {
                            let m = Tensor::from_fn(&[batch, 1], |b| if coins[b] { 1.0 } else { 0.0 });
                            let keep = cx.constant(m.map(|v| 1.0 - v));
                            let m = cx.constant(m);
                            let a = cx.tape.mul(gt, m)?;
                            let b = cx.tape.mul(state.next_input, keep)?;
                            cx.tape.add(a, b)?
                        };
                    }
                    prev_truth = Some(Tensor::new(&[batch, d], cur.to_vec())?);
                }
            }
            let (pose, _, next) = self.step(cx, &state)?;
            state = next;
            poses.push(cx.tape.reshape(pose, &[1, batch, self.n_joints, 3])?);
        }
        Ok((cx.tape.concat(&poses, 0)?, state))
    }

    pub fn predict(&self, cx: &mut Ctx<'_>, p: Var, x_last: Var, horizon: usize, mode: DecodeMode<'_>) -> Result<Var> {
        let state = self.init_state(cx, p, x_last)?;
        Ok(self.run(cx, state, horizon, mode)?.0)
    }
}
