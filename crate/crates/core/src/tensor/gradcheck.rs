//! Central finite-difference checks of the tape's analytic gradients.

use std::fmt;

use rand::Rng;

use super::{Result, Tape, Tensor, Var};
use crate::rng::sub_rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Primitive operations exposed by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Exp,
    Log,
    Sum,
    Mean,
    MaxReduce,
    Concat,
    Reshape,
    Transpose,
    BatchNorm,
    Power,
    Slice,
    Huber,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MaxReduce,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::BatchNorm,
        OpKind::Power,
        OpKind::Slice,
        OpKind::Huber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MaxReduce => "max-reduce",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Power => "power",
            OpKind::Slice => "slice",
            OpKind::Huber => "huber",
        }
    }

    /// Applies the op in the canonical configuration used for checking.
    pub fn apply(self, tape: &mut Tape, x: &[Var]) -> Result<Var> {
        Ok(match self {
            OpKind::MatMul => tape.matmul(x[0], x[1])?,
            OpKind::Add => tape.add(x[0], x[1])?,
            OpKind::Sub => tape.sub(x[0], x[1])?,
            OpKind::Mul => tape.mul(x[0], x[1])?,
            OpKind::ScalarMul => tape.scale(x[0], -1.7),
            OpKind::Relu => tape.relu(x[0]),
            OpKind::Sigmoid => tape.sigmoid(x[0]),
            OpKind::Tanh => tape.tanh(x[0]),
            OpKind::Softmax => tape.softmax(x[0])?,
            OpKind::Exp => tape.exp(x[0]),
            OpKind::Log => tape.log(x[0])?,
            OpKind::Sum => tape.sum_axis(x[0], 1, false)?,
            OpKind::Mean => tape.mean_axis(x[0], 2, true)?,
            OpKind::MaxReduce => tape.max_axis(x[0], 1, false)?,
            OpKind::Concat => tape.concat(x, 1)?,
            OpKind::Reshape => tape.reshape(x[0], &[3, 4])?,
            OpKind::Transpose => tape.transpose(x[0], 0, 2)?,
            OpKind::BatchNorm => tape.batchnorm(x[0], 1e-5)?.0,
            OpKind::Power => tape.powf(x[0], 2.5)?,
            OpKind::Slice => tape.slice(x[0], 0, 1, 2)?,
            OpKind::Huber => tape.huber(x[0], 0.8)?,
        })
    }

    /// Seeded inputs in [-2, 2], kept at least 1e-3 away from kinks and
    /// inside each op's domain.
    pub fn sample_inputs<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<Tensor> {
        let mut u = |shape: &[usize]| Tensor::uniform(shape, 2.0, rng);
        match self {
            OpKind::MatMul => vec![u(&[3, 4]), u(&[4, 2])],
            OpKind::Add => vec![u(&[3, 4]), u(&[4])],
            OpKind::Sub => vec![u(&[2, 1, 3]), u(&[4, 3])],
            OpKind::Mul => vec![u(&[3, 4]), u(&[3, 1])],
            OpKind::Relu => vec![u(&[3, 4]).map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x })],
            OpKind::Log | OpKind::Power => vec![u(&[3, 4]).map(|x| 0.1 + x.abs() * 0.95)],
            OpKind::Sum => vec![u(&[2, 3, 4])],
            OpKind::Mean => vec![u(&[2, 3, 4])],
            OpKind::MaxReduce => {
                // distinct row entries: shuffled ladder with spacing 0.3 plus jitter
                let mut t = u(&[3, 4]);
                for (r, row) in t.data_mut().chunks_mut(4).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        let rung = ((j + r) % 4) as f64;
                        *x = -1.0 + 0.6 * rung + 0.1 * x.clamp(-1.0, 1.0);
                    }
                }
                vec![t]
            }
            OpKind::Concat => vec![u(&[2, 3]), u(&[2, 2])],
            OpKind::Reshape => vec![u(&[2, 6])],
            OpKind::Transpose => vec![u(&[2, 3, 4])],
            OpKind::BatchNorm => vec![u(&[16, 8])],
            OpKind::Slice => vec![u(&[4, 3])],
            OpKind::Huber => vec![u(&[3, 4]).map(|x| if (x.abs() - 0.8).abs() < 1e-3 { x * 1.01 } else { x })],
            OpKind::ScalarMul | OpKind::Sigmoid | OpKind::Tanh | OpKind::Softmax | OpKind::Exp => {
                vec![u(&[3, 4])]
            }
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub label: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    pub error: Option<String>,
}

impl GradCheckEntry {
    pub fn from_errors(label: impl Into<String>, errs: &[f64], skipped: usize, tol: f64) -> Self {
        let max = errs.iter().cloned().fold(0.0, f64::max);
        Self {
            label: label.into(),
            max_rel_err: max,
            checked: errs.len(),
            skipped,
            passed: max < tol && !errs.is_empty(),
            error: None,
        }
    }

    pub fn failure(label: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            max_rel_err: f64::INFINITY,
            checked: 0,
            skipped: 0,
            passed: false,
            error: Some(error.into()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.passed { "PASS" } else { "FAIL" };
            write!(
                f,
                "{status} {:<40} max_rel_err={:.3e} checked={}",
                e.label, e.max_rel_err, e.checked
            )?;
            if e.skipped > 0 {
                write!(f, " skipped_at_kinks={}", e.skipped)?;
            }
            if let Some(err) = &e.error {
                write!(f, " error=\"{err}\"")?;
            }
            writeln!(f)?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} of {} checks passed at tol {:e}",
            self.entries.len() - failed,
            self.entries.len(),
            self.tol
        )
    }
}

// fixed, non-uniform output weighting so that e.g. sum(softmax) is not constant
fn output_weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| (0.7 * i as f64 + 0.3).cos())
}

fn weighted_loss(op: OpKind, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), track)).collect();
    let out = op.apply(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[n])?;
    let w = tape.constant(output_weights(n));
    let prod = tape.mul(flat, w)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Compares analytic gradients of `sum(w ⊙ op(inputs))` against central
/// differences with step `h`. Errors are reported in the entry.
pub fn grad_check(op: OpKind, inputs: &[Tensor], h: f64, tol: f64) -> GradCheckEntry {
    let run = || -> Result<Vec<f64>> {
        let (tape, vars, loss) = weighted_loss(op, inputs, true)?;
        let grads = tape.backward(loss)?;
        let mut errs = vec![];
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            for j in 0..inputs[k].numel() {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[j] += h;
                let (t, _, l) = weighted_loss(op, &probe, false)?;
                let plus = t.value(l).item();
                probe[k].data_mut()[j] -= 2.0 * h;
                let (t, _, l) = weighted_loss(op, &probe, false)?;
                let minus = t.value(l).item();
                errs.push(relative_error(analytic.data()[j], (plus - minus) / (2.0 * h)));
            }
        }
        Ok(errs)
    };
    match run() {
        Ok(errs) => GradCheckEntry::from_errors(op.name(), &errs, 0, tol),
        Err(e) => GradCheckEntry::failure(op.name(), e.to_string()),
    }
}

/// Checks every primitive on inputs drawn from `seed`.
pub fn check_all_ops(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    let mut rng = sub_rng(seed, "gradcheck-ops");
    let entries = OpKind::ALL
        .iter()
        .map(|&op| {
            let inputs = op.sample_inputs(&mut rng);
            grad_check(op, &inputs, h, tol)
        })
        .collect();
    GradCheckReport { tol, entries }
}
