//! Prediction loss, its unit-sphere penalty, and the weighted combination
//! with the recognition loss.

pub use crate::tensor::huber;
use crate::tensor::{invalid, Result, Tape, Tensor, Var};

/// Mean Huber error between `pred` and `truth` plus `γ_p` times the mean
/// over predicted joints of `(x² + y² + z² − 1)²`. Both are `[.., N, 3]`.
pub fn prediction_loss(tape: &mut Tape, pred: Var, truth: Var, beta: f64, gamma_p: f64) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != tape.shape(truth) {
        return Err(invalid(
            "prediction_loss",
            format!("prediction {shape:?} vs truth {:?}", tape.shape(truth)),
        ));
    }
    if shape.last() != Some(&3) {
        return Err(invalid("prediction_loss", format!("expected [.., N, 3], got {shape:?}")));
    }
    let d = tape.sub(pred, truth)?;
    let h = tape.huber(d, beta)?;
    let data_term = tape.mean(h);
    if gamma_p == 0.0 {
        return Ok(data_term);
    }
    let sq = tape.mul(pred, pred)?;
    let r2 = tape.sum_axis(sq, shape.len() - 1, false)?;
    let off = tape.add_scalar(r2, -1.0);
    let off2 = tape.mul(off, off)?;
    let pen = tape.mean(off2);
    let pen = tape.scale(pen, gamma_p);
    tape.add(data_term, pen)
}

/// `λ·l_pred + (1 − λ)·l_rec`.
pub fn combined_loss(tape: &mut Tape, l_pred: Var, l_rec: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(l_pred, lambda);
    let b = tape.scale(l_rec, 1.0 - lambda);
    tape.add(a, b)
}

/// Plain evaluation of [`prediction_loss`] on tensors.
pub fn prediction_loss_value(pred: &Tensor, truth: &Tensor, beta: f64, gamma_p: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(truth.clone());
    let l = prediction_loss(&mut tape, p, t, beta, gamma_p)?;
    Ok(tape.value(l).item())
}
