//! Finite-difference verification of whole computations with respect to
//! their parameters.

use rand::seq::index::sample;

use crate::layers::{Ctx, Mode};
use crate::loss::{combined_loss, prediction_loss};
use crate::model::{Model, ModelConfig};
use crate::motion::DecodeMode;
use crate::recognition::{crf_nll, CRF_L2};
use crate::rng::sub_rng;
use crate::skeleton::SkeletonTopology;
use crate::tensor::gradcheck::{check_all_ops, GradCheckEntry, GradCheckReport};
use crate::tensor::{invalid, ParamStore, Result, Tape, Tensor, Var};

/// Denominator floor for parameter checks. Central differences of an O(1)
/// loss resolve gradients only to about `ulp(loss) / 2h`, so gradients
/// smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks analytic parameter gradients of `loss_fn` against central
/// differences on up to `per_param` sampled coordinates of every trainable
/// parameter.
///
/// A coordinate is skipped when either probe lands on a different
/// piecewise-linear branch (relu sign or max argument) than the base
/// point, since the finite difference is meaningless there.
pub fn param_grad_check<F>(store: &ParamStore, loss_fn: F, per_param: usize, seed: u64, h: f64, tol: f64) -> Vec<GradCheckEntry>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let base = match loss_fn(store) {
        Ok(x) => x,
        Err(e) => return vec![GradCheckEntry::failure("composite", e.to_string())],
    };
    let (tape, loss) = base;
    let signature = tape.kink_signature();
    let grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(e) => return vec![GradCheckEntry::failure("composite", e.to_string())],
    };
    let mut analytic = store.clone();
    analytic.clear_grads();
    grads.accumulate_into(&mut analytic);

    let mut rng = sub_rng(seed, "param-grad-check");
    let mut probe = store.clone();
    let mut entries = vec![];
    for (id, p) in store.trainable() {
        let n = p.value.numel();
        let coords = sample(&mut rng, n, per_param.min(n)).into_vec();
        let grad = analytic.get(id).grad.clone();
        let mut errs = vec![];
        let mut skipped = 0;
        let mut failure = None;
        for j in coords {
            let original = p.value.data()[j];
            let eval = |x: f64, probe: &mut ParamStore| -> Result<(f64, u64)> {
                probe.get_mut(id).value.data_mut()[j] = x;
                let (t, l) = loss_fn(probe)?;
                Ok((t.value(l).item(), t.kink_signature()))
            };
            let plus = eval(original + h, &mut probe);
            let minus = eval(original - h, &mut probe);
            probe.get_mut(id).value.data_mut()[j] = original;
            match (plus, minus) {
                (Ok((fp, sp)), Ok((fm, sm))) => {
                    if sp != signature || sm != signature {
                        skipped += 1;
                        continue;
                    }
                    let a = grad.as_ref().map_or(0.0, |g| g.data()[j]);
                    let n = (fp - fm) / (2.0 * h);
                    errs.push((a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR));
                }
                (Err(e), _) | (_, Err(e)) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        entries.push(match failure {
            Some(e) => GradCheckEntry::failure(p.name.clone(), e),
            None => GradCheckEntry::from_errors(p.name.clone(), &errs, skipped, tol),
        });
    }
    entries
}

/// `sum(w ⊙ v)` with fixed, non-uniform weights, a scalar probe of `v` that
/// is not invariant under normalizing layers the way a plain sum is.
pub fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    let flat = tape.reshape(v, &[n])?;
    let w = tape.constant(Tensor::from_fn(&[n], |i| (0.7 * i as f64 + 0.3).cos()));
    let prod = tape.mul(flat, w)?;
    Ok(tape.sum(prod))
}

/// Joints, observed frames, predicted frames and labels of the end-to-end check.
pub const COMPOSITE_SHAPE: (usize, usize, usize, usize) = (5, 4, 3, 2);

/// Finite-difference check of `λ·L_pred + (1 − λ)·L_rec` through the whole
/// model (encoder, attention, both decoders) with respect to every
/// trainable parameter, on a small seeded batch with teacher forcing at
/// `p = 0.5` and fixed coins.
pub fn composite_grad_check(seed: u64, per_param: usize, h: f64, tol: f64) -> Vec<GradCheckEntry> {
    let (n, tau, horizon, labels) = COMPOSITE_SHAPE;
    let config = ModelConfig {
        tc_hidden: 6,
        ..ModelConfig::new(n, tau, horizon, labels)
    };
    let topology = SkeletonTopology::default_for(n).expect("chain skeleton");
    let names = (0..labels).map(|l| format!("l{l}")).collect();
    let model = match Model::new(config, topology, names, seed) {
        Ok(m) => m,
        Err(e) => return vec![GradCheckEntry::failure("composite", e.to_string())],
    };
    let batch = 3;
    let mut rng = sub_rng(seed, "composite-data");
    let x_prev = Tensor::uniform(&[tau, batch, n, 3], 1.0, &mut rng);
    let x_fut = Tensor::uniform(&[horizon, batch, n, 3], 1.0, &mut rng);
    let paths = vec![vec![0, 0, 1, 1], vec![1, 1, 1, 1], vec![0, 1, 0, 1]];
    let loss_fn = |store: &ParamStore| -> Result<(Tape, Var)> {
        let mut cx = Ctx::new(store, Mode::Train);
        let mut coins = sub_rng(seed, "composite-coins");
        let mode = DecodeMode::Training {
            p: 0.5,
            truth: &x_fut,
            rng: &mut coins,
        };
        let out = model.forward(&mut cx, &x_prev, horizon, mode).map_err(|e| invalid("composite", e.to_string()))?;
        let truth = cx.constant(x_fut.clone());
        // β below the typical error so both Huber branches are exercised
        let l_pred = prediction_loss(&mut cx.tape, out.prediction, truth, 0.5, 0.1)?;
        let w = cx.param(model.recognition.transitions);
        let l_rec = crf_nll(&mut cx, out.unary, w, &paths, CRF_L2)?;
        let loss = combined_loss(&mut cx.tape, l_pred, l_rec, 0.4)?;
        Ok((cx.tape, loss))
    };
    let mut entries = param_grad_check(&model.params, loss_fn, per_param, seed, h, tol);
    for e in &mut entries {
        e.label = format!("composite/{}", e.label);
    }
    entries
}

/// Every primitive op followed by the end-to-end composite check.
pub fn full_report(seed: u64, per_param: usize, h: f64, tol: f64) -> GradCheckReport {
    let mut report = check_all_ops(seed, h, tol);
    report.entries.extend(composite_grad_check(seed, per_param, h, tol));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{DEFAULT_STEP, DEFAULT_TOL};

    #[test]
    fn composite_model_gradients_match_finite_differences() {
        let entries = composite_grad_check(5, 2, DEFAULT_STEP, DEFAULT_TOL);
        assert!(entries.len() > 30);
        for e in &entries {
            assert!(e.passed, "{} max_rel_err={:e} error={:?}", e.label, e.max_rel_err, e.error);
        }
        assert!(entries.iter().any(|e| e.label.starts_with("composite/recog.")));
        assert!(entries.iter().any(|e| e.label.starts_with("composite/motion.")));
        assert!(entries.iter().any(|e| e.label.starts_with("composite/ngc.")));
    }

    #[test]
    fn report_is_deterministic() {
        let a = composite_grad_check(9, 1, DEFAULT_STEP, DEFAULT_TOL);
        let b = composite_grad_check(9, 1, DEFAULT_STEP, DEFAULT_TOL);
        assert_eq!(a, b);
    }
}
