use proptest::prelude::*;

use super::*;
use crate::rng::sub_rng;
use crate::skeleton::{normalize, NormalizedAdjacency, SkeletonTopology};
use crate::tensor::gradcheck::{DEFAULT_STEP, DEFAULT_TOL};
use crate::tensor::Result;
use crate::verify::{param_grad_check, weighted_sum};

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut sub_rng(seed, "layer-test-input"))
}

fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
    assert_eq!(store.value(id).shape(), t.shape());
    store.get_mut(id).value = t;
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        set(store, id, Tensor::zeros(&shape));
    }
}

fn run(store: &ParamStore, mode: Mode, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut cx = Ctx::new(store, mode);
    let v = cx.tape.input(x.clone(), false);
    let y = f(&mut cx, v)?;
    Ok(cx.tape.value(y).clone())
}

fn path_graph(n: usize) -> NormalizedAdjacency {
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    normalize(&SkeletonTopology::new(n, &edges).unwrap()).unwrap()
}

// plain loops: out[r, n, o] = Σ_m Σ_f adj[n, m] x[r, m, f] w[f, o]
fn dense_gcn(adj: &[f64], x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (rows, n, fi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fo = w.shape()[1];
    let mut out = vec![0.0; rows * n * fo];
    for r in 0..rows {
        for i in 0..n {
            for o in 0..fo {
                let mut acc = 0.0;
                for m in 0..n {
                    for f in 0..fi {
                        acc += adj[i * n + m] * x.data()[(r * n + m) * fi + f] * w.data()[f * fo + o];
                    }
                }
                out[(r * n + i) * fo + o] = acc;
            }
        }
    }
    out
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn assert_grads_ok(store: &ParamStore, f: impl Fn(&ParamStore) -> Result<(Tape, Var)>) {
    let entries = param_grad_check(store, f, 6, 11, DEFAULT_STEP, DEFAULT_TOL);
    assert!(!entries.is_empty());
    for e in &entries {
        assert!(e.passed, "{e:?}");
    }
}

#[test]
fn gcn_with_identity_pieces_passes_input_through() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), &NormalizedAdjacency::identity(4), 3, 3, false);
    set(&mut store, layer.weight, Tensor::eye(3));
    let x = seeded(&[5, 4, 3], 1).map(f64::abs);
    let y = run(&store, Mode::Train, &x, |cx, v| layer.forward(cx, v)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn gcn_on_single_joint_is_dense_layer() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let adj = normalize(&SkeletonTopology::new(1, &[]).unwrap()).unwrap();
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), &adj, 3, 5, false);
    let x = seeded(&[7, 1, 3], 2);
    let y = run(&store, Mode::Train, &x, |cx, v| layer.forward(cx, v)).unwrap();
    let w = store.value(layer.weight);
    let mut expected = vec![0.0; 35];
    for r in 0..7 {
        for o in 0..5 {
            let dot: f64 = (0..3).map(|f| x.data()[r * 3 + f] * w.data()[f * 5 + o]).sum();
            expected[r * 5 + o] = dot.max(0.0);
        }
    }
    assert_close(y.data(), &expected, 1e-12);
}

#[test]
fn gcn_path_graph_matches_dense_oracle_with_batch_stats() {
    let n = 4;
    let mut store = ParamStore::new();
    let mut rng = sub_rng(3, "init");
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), &path_graph(n), 3, 2, true);
    let x = seeded(&[6, n, 3], 4);
    let y = run(&store, Mode::Train, &x, |cx, v| layer.forward(cx, v)).unwrap();

    // Ânorm built by hand: degrees with self-loops are 2 at the ends, 3 inside.
    let deg = [2.0, 3.0, 3.0, 2.0_f64];
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || i.abs_diff(j) == 1 {
                adj[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    let z = dense_gcn(&adj, &x, store.value(layer.weight));
    let (rows, ch) = (6, n * 2);
    let mut expected = vec![0.0; z.len()];
    for c in 0..ch {
        let col: Vec<f64> = (0..rows).map(|r| z[r * ch + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            expected[r * ch + c] = ((col[r] - mean) / (var + 1e-5).sqrt()).max(0.0);
        }
    }
    assert_close(y.data(), &expected, 1e-10);
}

#[test]
fn gcn_rejects_wrong_feature_width() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), &path_graph(3), 4, 2, true);
    assert!(run(&store, Mode::Train, &seeded(&[2, 3, 3], 0), |cx, v| layer.forward(cx, v)).is_err());
}

#[test]
fn batchnorm_eval_uses_running_stats_after_update() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let bn = BatchNorm::new(&mut Init::new(&mut store, &mut rng), 2);
    let x = Tensor::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
    let mut cx = Ctx::new(&store, Mode::Train);
    let v = cx.tape.input(x.clone(), false);
    bn.forward(&mut cx, v).unwrap();
    let updates = cx.take_running_updates();
    apply_running_updates(&mut store, updates);
    let (mean, var) = bn.running_stats(&store);
    assert_close(mean.data(), &[0.2, 2.0], 1e-12);
    // unbiased batch variances are 1 and 100
    assert_close(var.data(), &[0.9 + 0.1, 0.9 + 10.0], 1e-12);

    let y = run(&store, Mode::Eval, &x, |cx, v| bn.forward(cx, v)).unwrap();
    let expected: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean.data()[i % 2]) / (var.data()[i % 2] + 1e-5).sqrt())
        .collect();
    assert_close(y.data(), &expected, 1e-12);
}

#[test]
fn res_gcn_with_zero_branch_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let block = ResGcnBlock::new(&mut Init::new(&mut store, &mut rng), &path_graph(5), 3, 4, 3, false);
    assert!(block.skip.is_none());
    zero_all(&mut store);
    let x = seeded(&[4, 5, 3], 5);
    let y = run(&store, Mode::Train, &x, |cx, v| block.forward(cx, v)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn res_gcn_narrows_to_three_features() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let block = ResGcnBlock::new(&mut Init::new(&mut store, &mut rng), &path_graph(17), 8, 4, 3, true);
    let y = run(&store, Mode::Train, &seeded(&[6, 17, 8], 6), |cx, v| block.forward(cx, v)).unwrap();
    assert_eq!(y.shape(), &[6, 17, 3]);
    assert_eq!(block.out_features(), 3);
}

#[test]
fn res_gcn_matches_composition_oracle() {
    let adj = path_graph(4);
    let mut store = ParamStore::new();
    let mut rng = sub_rng(7, "init");
    let block = ResGcnBlock::new(&mut Init::new(&mut store, &mut rng), &adj, 5, 4, 3, false);
    let x = seeded(&[3, 4, 5], 8);
    let y = run(&store, Mode::Train, &x, |cx, v| block.forward(cx, v)).unwrap();

    let a = adj.matrix().data();
    let h1 = relu(dense_gcn(a, &x, store.value(block.first.weight)));
    let h1 = Tensor::new(&[3, 4, 4], h1).unwrap();
    let h2 = relu(dense_gcn(a, &h1, store.value(block.second.weight)));
    let ws = store.value(block.skip.as_ref().unwrap().weight);
    let expected: Vec<f64> = (0..3 * 4 * 3)
        .map(|i| {
            let (row, o) = (i / 3, i % 3);
            let skip: f64 = (0..5).map(|f| x.data()[row * 5 + f] * ws.data()[f * 3 + o]).sum();
            h2[i] + skip
        })
        .collect();
    assert_close(y.data(), &expected, 1e-12);
}

#[test]
fn temporal_conv_with_zero_weights_outputs_zero() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let tc = TemporalConv::new(&mut Init::new(&mut store, &mut rng), 6, TC_HIDDEN);
    zero_all(&mut store);
    let y = run(&store, Mode::Train, &seeded(&[6, 2, 5], 9), |cx, v| tc.forward(cx, v)).unwrap();
    assert_eq!(y, Tensor::zeros(&[6, 2, 5]));
}

#[test]
fn temporal_conv_single_position_matches_matrix_oracle() {
    let tau = 5;
    let mut store = ParamStore::new();
    let mut rng = sub_rng(10, "init");
    let tc = TemporalConv::new(&mut Init::new(&mut store, &mut rng), tau, TC_HIDDEN);
    let x = seeded(&[tau, 1], 11);
    let y = run(&store, Mode::Train, &x, |cx, v| tc.forward(cx, v)).unwrap();
    let (w1, w2) = (store.value(tc.expand).data(), store.value(tc.contract).data());
    let hidden: Vec<f64> = (0..TC_HIDDEN)
        .map(|k| (0..tau).map(|t| w1[k * tau + t] * x.data()[t]).sum::<f64>().max(0.0))
        .collect();
    let expected: Vec<f64> = (0..tau)
        .map(|t| (0..TC_HIDDEN).map(|k| w2[t * TC_HIDDEN + k] * hidden[k]).sum::<f64>().max(0.0))
        .collect();
    assert_eq!(y.shape(), &[tau, 1]);
    assert_close(y.data(), &expected, 1e-12);
}

#[test]
fn temporal_conv_rejects_other_lengths() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let tc = TemporalConv::new(&mut Init::new(&mut store, &mut rng), 6, 8);
    assert!(run(&store, Mode::Train, &seeded(&[5, 3], 0), |cx, v| tc.forward(cx, v)).is_err());
}

#[test]
fn res_cnn_is_skip_plus_conv() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(12, "init");
    let block = ResCnn::new(&mut Init::new(&mut store, &mut rng), 4, 8);
    let x = seeded(&[4, 3], 13);
    let y = run(&store, Mode::Train, &x, |cx, v| block.forward(cx, v)).unwrap();
    let conv = run(&store, Mode::Train, &x, |cx, v| block.conv.forward(cx, v)).unwrap();
    let expected: Vec<f64> = x.data().iter().zip(conv.data()).map(|(a, b)| a + b).collect();
    assert_eq!(y.shape(), &[4, 3]);
    assert_close(y.data(), &expected, 1e-14);

    zero_all(&mut store);
    let y = run(&store, Mode::Train, &x, |cx, v| block.forward(cx, v)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn frame_conv_matches_sliding_window_oracle() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(14, "init");
    let conv = FrameConv::new(&mut Init::new(&mut store, &mut rng), 2, 3);
    let (tau, batch) = (4, 2);
    let x = seeded(&[tau, batch, 2], 15);
    let y = run(&store, Mode::Train, &x, |cx, v| conv.forward(cx, v)).unwrap();
    let (w, b) = (store.value(conv.weight).data(), store.value(conv.bias).data());
    let at = |t: isize, bi: usize, c: usize| {
        if t < 0 || t >= tau as isize {
            0.0
        } else {
            x.data()[(t as usize * batch + bi) * 2 + c]
        }
    };
    for t in 0..tau {
        for bi in 0..batch {
            for o in 0..3 {
                let mut acc = b[o];
                for k in 0..3 {
                    for c in 0..2 {
                        acc += w[(k * 2 + c) * 3 + o] * at(t as isize + k as isize - 1, bi, c);
                    }
                }
                let got = y.data()[(t * batch + bi) * 3 + o];
                assert!((got - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lstm_with_zero_weights_is_silent() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let stack = LstmStack::new(&mut Init::new(&mut store, &mut rng), 3, 4, 4, true);
    zero_all(&mut store);
    let mut cx = Ctx::new(&store, Mode::Train);
    let x = cx.tape.input(seeded(&[5, 2, 3], 16), false);
    let out = stack.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.value(out.outputs), &Tensor::zeros(&[5, 2, 8]));
    assert_eq!(cx.tape.value(out.hidden), &Tensor::zeros(&[5, 2, 4]));
}

#[test]
fn bilstm_output_widths_for_seventeen_joints() {
    let n = 17;
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let stack = LstmStack::new(&mut Init::new(&mut store, &mut rng), n * 8, n * 8, 4, true);
    let mut cx = Ctx::new(&store, Mode::Train);
    let x = cx.tape.input(seeded(&[10, 2, n * 8], 17), false);
    let out = stack.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(out.outputs), &[10, 2, 272]);
    assert_eq!(cx.tape.shape(out.hidden), &[10, 2, 136]);
}

#[test]
fn bilstm_time_reversal_swaps_directions() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(18, "init");
    let stack = LstmStack::new(&mut Init::new(&mut store, &mut rng), 3, 4, 1, true);
    let mut swapped = store.clone();
    let (f, b) = (&stack.layers[0][0], &stack.layers[0][1]);
    for (a, c) in [
        (f.input_weight, b.input_weight),
        (f.hidden_weight, b.hidden_weight),
        (f.bias, b.bias),
    ] {
        swapped.get_mut(a).value = store.value(c).clone();
        swapped.get_mut(c).value = store.value(a).clone();
    }
    let (tau, batch) = (6, 2);
    let x = seeded(&[tau, batch, 3], 19);
    let x_rev = Tensor::from_fn(&[tau, batch, 3], |i| {
        let t = i / (batch * 3);
        x.data()[(tau - 1 - t) * batch * 3 + i % (batch * 3)]
    });
    let o = run(&store, Mode::Train, &x, |cx, v| Ok(stack.forward(cx, v)?.outputs)).unwrap();
    let o_rev = run(&swapped, Mode::Train, &x_rev, |cx, v| Ok(stack.forward(cx, v)?.outputs)).unwrap();
    for t in 0..tau {
        for bi in 0..batch {
            for k in 0..8 {
                let got = o_rev.data()[(t * batch + bi) * 8 + k];
                let want = o.data()[((tau - 1 - t) * batch + bi) * 8 + (k + 4) % 8];
                assert!((got - want).abs() < 1e-12, "t={t} b={bi} k={k}");
            }
        }
    }
}

#[test]
fn unidirectional_stack_keeps_output_width() {
    let mut store = ParamStore::new();
    let mut rng = sub_rng(0, "init");
    let stack = LstmStack::new(&mut Init::new(&mut store, &mut rng), 3, 4, 2, false);
    let mut cx = Ctx::new(&store, Mode::Train);
    let x = cx.tape.input(seeded(&[5, 2, 3], 20), false);
    let out = stack.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(out.outputs), &[5, 2, 8]);
    assert_eq!(cx.tape.shape(out.hidden), &[5, 2, 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lstm_gates_stay_in_open_ranges(seed in any::<u64>(), scale in 0.1f64..8.0) {
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "init");
        let cell = LstmCell::new(&mut Init::new(&mut store, &mut rng), 3, 4);
        let mut cx = Ctx::new(&store, Mode::Train);
        let (mut h, mut c) = cell.zero_state(&mut cx, 2);
        for t in 0..4 {
            let x = cx.tape.input(seeded(&[2, 3], seed ^ t).map(|v| v * scale), false);
            let (hn, cn, g) = cell.step(&mut cx, x, h, c).unwrap();
            for (v, lo) in [(g.input, 0.0), (g.forget, 0.0), (g.output, 0.0), (g.cell, -1.0)] {
                for &a in cx.tape.value(v).data() {
                    prop_assert!(a > lo && a < 1.0, "gate value {a}");
                }
            }
            prop_assert_eq!(cx.tape.shape(hn), cx.tape.shape(cn));
            h = hn;
            c = cn;
        }
    }
}

#[test]
fn spatial_pool_takes_joint_maximum() {
    let store = ParamStore::new();
    let x = Tensor::full(&[3, 2, 4, 5], 0.25);
    assert_eq!(run(&store, Mode::Eval, &x, spatial_max_pool).unwrap(), Tensor::full(&[3, 2, 5], 0.25));

    let mut spike = Tensor::full(&[2, 1, 4, 3], -1.0);
    spike.data_mut()[(4 + 2) * 3 + 1] = 7.0;
    let y = run(&store, Mode::Eval, &spike, spatial_max_pool).unwrap();
    assert_eq!(y.data()[3 + 1], 7.0);

    let x = seeded(&[3, 2, 4, 5], 21);
    let y = run(&store, Mode::Eval, &x, spatial_max_pool).unwrap();
    for r in 0..6 {
        for f in 0..5 {
            let m = (0..4).map(|j| x.data()[(r * 4 + j) * 5 + f]).fold(f64::MIN, f64::max);
            assert_eq!(y.data()[r * 5 + f], m);
        }
    }
}

#[test]
fn temporal_pool_keeps_length() {
    let store = ParamStore::new();
    let x = Tensor::new(&[4, 1, 1], vec![1.0, 3.0, 2.0, 0.5]).unwrap();
    let y = run(&store, Mode::Eval, &x, temporal_max_pool).unwrap();
    assert_eq!(y.data(), &[3.0, 3.0, 2.0, 0.5]);
}

#[test]
fn layer_gradients_match_finite_differences() {
    let adj = path_graph(4);
    let mut store = ParamStore::new();
    let mut rng = sub_rng(22, "init");
    let mut init = Init::new(&mut store, &mut rng);
    let gcn = GcnLayer::new(&mut init.scope("gcn"), &adj, 3, 4, true);
    let res = ResGcnBlock::new(&mut init.scope("res"), &adj, 4, 3, 2, true);
    let tc = TemporalConv::new(&mut init.scope("tc"), 3, 8);
    let lstm = LstmStack::new(&mut init.scope("lstm"), 8, 3, 2, true);
    let cnn = ResCnn::new(&mut init.scope("cnn"), 3, 8);
    let conv = FrameConv::new(&mut init.scope("conv"), 6, 4);
    let head = Linear::new(&mut init.scope("head"), 4, 2, true);
    let x = seeded(&[3 * 2, 4, 3], 23);

    assert_grads_ok(&store, |store| {
        let mut cx = Ctx::new(store, Mode::Train);
        let v = cx.tape.input(x.clone(), false);
        let g = gcn.forward(&mut cx, v)?;
        let g = res.forward(&mut cx, g)?;
        let seq = cx.tape.reshape(g, &[3, 2, 8])?;
        let seq = tc.forward(&mut cx, seq)?;
        let out = lstm.forward(&mut cx, seq)?;
        let o = cnn.forward(&mut cx, out.outputs)?;
        let o = conv.forward(&mut cx, o)?;
        let o = temporal_max_pool(&mut cx, o)?;
        let o = head.forward(&mut cx, o)?;
        let both = cx.tape.concat(&[o, out.hidden], 2)?;
        let loss = weighted_sum(&mut cx.tape, both)?;
        Ok((cx.tape, loss))
    });
}
