//! Non-local graph attention over frames.
//!
//! Query and key channels transform the encoder hidden states, the value
//! channel transforms the encoder outputs; each channel is a Res-GCN block
//! followed by a temporal convolution and ends at 3 features per joint.
//! Frames are flattened to `3N` vectors before the `τ × τ` affinity.

use crate::encoder::{EncoderOutput, HIDDEN_PER_JOINT};
use crate::layers::{Ctx, Init, Linear, ResGcnBlock, TemporalConv};
use crate::skeleton::NormalizedAdjacency;
use crate::tensor::{invalid, Result, Var};

#[derive(Clone, Debug)]
pub struct Channel {
    pub res: ResGcnBlock,
    pub tc: TemporalConv,
}

impl Channel {
    fn new(init: &mut Init<'_>, adj: &NormalizedAdjacency, tau: usize, tc_hidden: usize, in_f: usize, bn: bool) -> Self {
        Self {
            res: ResGcnBlock::new(&mut init.scope("res"), adj, in_f, in_f / 2, 3, bn),
            tc: TemporalConv::new(&mut init.scope("tc"), tau, tc_hidden),
        }
    }

    /// `[τ, B, N·F] -> [B, τ, 3N]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let n = self.res.first.n_joints();
        let f = self.res.first.in_features;
        if shape.len() != 3 || shape[2] != n * f {
            return Err(invalid("ngc", format!("expected [τ, B, {}], got {shape:?}", n * f)));
        }
        let (tau, batch) = (shape[0], shape[1]);
        let rows = cx.tape.reshape(x, &[tau * batch, n, f])?;
        let y = self.res.forward(cx, rows)?;
        let y = cx.tape.reshape(y, &[tau, batch, n * 3])?;
        let y = self.tc.forward(cx, y)?;
        cx.tape.transpose(y, 0, 1)
    }
}

/// `Q Kᵀ / √D` for `[B, τ, D]` inputs.
pub fn attention_logits(cx: &mut Ctx<'_>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (cx.tape.shape(q).to_vec(), cx.tape.shape(k).to_vec());
    if qs.len() != 3 || qs != ks {
        return Err(invalid("attention", format!("query {qs:?} and key {ks:?} must both be [B, τ, D]")));
    }
    let kt = cx.tape.transpose(k, 1, 2)?;
    let logits = cx.tape.matmul(q, kt)?;
    Ok(cx.tape.scale(logits, 1.0 / (qs[2] as f64).sqrt()))
}

/// Row-wise softmax of [`attention_logits`].
pub fn attention_scores(cx: &mut Ctx<'_>, q: Var, k: Var) -> Result<Var> {
    let logits = attention_logits(cx, q, k)?;
    cx.tape.softmax(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[τ, B, N, 3]`.
    pub p: Var,
    /// `[B, τ, τ]`, absent for the projection variant.
    pub scores: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct NgcAttention {
    pub query: Channel,
    /// `None` when keys reuse the query channel.
    pub key: Option<Channel>,
    pub value: Channel,
    pub n_joints: usize,
}

impl NgcAttention {
    pub fn new(
        init: &mut Init<'_>,
        adj: &NormalizedAdjacency,
        tau: usize,
        tc_hidden: usize,
        shared_qk: bool,
        batchnorm: bool,
    ) -> Self {
        let h = HIDDEN_PER_JOINT;
        Self {
            query: Channel::new(&mut init.scope("query"), adj, tau, tc_hidden, h, batchnorm),
            key: (!shared_qk).then(|| Channel::new(&mut init.scope("key"), adj, tau, tc_hidden, h, batchnorm)),
            value: Channel::new(&mut init.scope("value"), adj, tau, tc_hidden, 2 * h, batchnorm),
            n_joints: adj.n(),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, enc: &EncoderOutput) -> Result<AttentionOutput> {
        let q = self.query.forward(cx, enc.h)?;
        let k = match &self.key {
            Some(key) => key.forward(cx, enc.h)?,
            None => q,
        };
        let v = self.value.forward(cx, enc.o)?;
        let s = attention_scores(cx, q, k)?;
        let p = cx.tape.matmul(s, v)?;
        let p = cx.tape.transpose(p, 0, 1)?;
        let shape = cx.tape.shape(p).to_vec();
        let p = cx.tape.reshape(p, &[shape[0], shape[1], self.n_joints, 3])?;
        Ok(AttentionOutput { p, scores: Some(s) })
    }
}

/// Attention replacement for ablations: the encoder output projected
/// straight to a pose-shaped map.
#[derive(Clone, Debug)]
pub struct OutputProjection {
    pub proj: Linear,
    pub n_joints: usize,
}

impl OutputProjection {
    pub fn new(init: &mut Init<'_>, n_joints: usize) -> Self {
        Self {
            proj: Linear::new(init, n_joints * 2 * HIDDEN_PER_JOINT, n_joints * 3, false),
            n_joints,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, enc: &EncoderOutput) -> Result<AttentionOutput> {
        let y = self.proj.forward(cx, enc.o)?;
        let shape = cx.tape.shape(y).to_vec();
        let p = cx.tape.reshape(y, &[shape[0], shape[1], self.n_joints, 3])?;
        Ok(AttentionOutput { p, scores: None })
    }
}

#[derive(Clone, Debug)]
pub enum FeatureMap {
    Ngc(NgcAttention),
    Projection(OutputProjection),
}

impl FeatureMap {
    pub fn forward(&self, cx: &mut Ctx<'_>, enc: &EncoderOutput) -> Result<AttentionOutput> {
        match self {
            FeatureMap::Ngc(a) => a.forward(cx, enc),
            FeatureMap::Projection(p) => p.forward(cx, enc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::rng::sub_rng;
    use crate::skeleton::{normalize, SkeletonTopology};
    use crate::tensor::{ParamStore, Tensor};
    use crate::verify::weighted_sum;

    struct Fixture {
        store: ParamStore,
        ngc: NgcAttention,
    }

    fn fixture(topo: &SkeletonTopology, tau: usize, shared: bool, seed: u64) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "init");
        let adj = normalize(topo).unwrap();
        let ngc = NgcAttention::new(&mut Init::new(&mut store, &mut rng), &adj, tau, 16, shared, true);
        Fixture { store, ngc }
    }

    fn encoder_like(tau: usize, batch: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = sub_rng(seed, "enc");
        (
            Tensor::uniform(&[tau, batch, n * 16], 1.0, &mut rng),
            Tensor::uniform(&[tau, batch, n * 8], 1.0, &mut rng),
        )
    }

    fn bind(cx: &mut Ctx<'_>, o: &Tensor, h: &Tensor) -> EncoderOutput {
        EncoderOutput {
            o: cx.tape.input(o.clone(), false),
            h: cx.tape.input(h.clone(), false),
        }
    }

    #[test]
    fn shapes_for_seventeen_joints() {
        let f = fixture(&SkeletonTopology::default_for(17).unwrap(), 10, false, 0);
        let (o, h) = encoder_like(10, 2, 17, 1);
        let mut cx = Ctx::new(&f.store, Mode::Train);
        let enc = bind(&mut cx, &o, &h);
        let out = f.ngc.forward(&mut cx, &enc).unwrap();
        assert_eq!(cx.tape.shape(out.p), &[10, 2, 17, 3]);
        assert_eq!(cx.tape.shape(out.scores.unwrap()), &[2, 10, 10]);
    }

    #[test]
    fn matches_dense_oracle() {
        let (tau, batch, n) = (5, 2, 4);
        let f = fixture(&SkeletonTopology::default_for(n).unwrap(), tau, false, 2);
        let (o, h) = encoder_like(tau, batch, n, 3);
        let mut cx = Ctx::new(&f.store, Mode::Train);
        let enc = bind(&mut cx, &o, &h);
        let out = f.ngc.forward(&mut cx, &enc).unwrap();
        let q = f.ngc.query.forward(&mut cx, enc.h).unwrap();
        let k = f.ngc.key.as_ref().unwrap().forward(&mut cx, enc.h).unwrap();
        let v = f.ngc.value.forward(&mut cx, enc.o).unwrap();
        let (q, k, v) = (cx.tape.value(q).data(), cx.tape.value(k).data(), cx.tape.value(v).data());
        let d = 3 * n;
        let p = cx.tape.value(out.p).data();
        for b in 0..batch {
            for i in 0..tau {
                let logits: Vec<f64> = (0..tau)
                    .map(|j| {
                        (0..d).map(|c| q[(b * tau + i) * d + c] * k[(b * tau + j) * d + c]).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..d {
                    let want: f64 = (0..tau).map(|j| (logits[j] - m).exp() / z * v[(b * tau + j) * d + c]).sum();
                    let got = p[(i * batch + b) * d + c];
                    assert!((got - want).abs() < 1e-12, "b={b} i={i} c={c}");
                }
            }
        }
    }

    #[test]
    fn constant_queries_average_values_over_time() {
        let (tau, n) = (6, 5);
        let mut f = fixture(&SkeletonTopology::default_for(n).unwrap(), tau, false, 4);
        for id in [f.ngc.query.tc.contract, f.ngc.key.as_ref().unwrap().tc.contract] {
            f.store.get_mut(id).value = Tensor::zeros(&[tau, 16]);
        }
        let (o, h) = encoder_like(tau, 1, n, 5);
        let mut cx = Ctx::new(&f.store, Mode::Train);
        let enc = bind(&mut cx, &o, &h);
        let out = f.ngc.forward(&mut cx, &enc).unwrap();
        for &s in cx.tape.value(out.scores.unwrap()).data() {
            assert!((s - 1.0 / tau as f64).abs() < 1e-15);
        }
        let v = f.ngc.value.forward(&mut cx, enc.o).unwrap();
        let v = cx.tape.value(v).data().to_vec();
        let p = cx.tape.value(out.p).data();
        for t in 0..tau {
            for c in 0..3 * n {
                let mean = (0..tau).map(|j| v[j * 3 * n + c]).sum::<f64>() / tau as f64;
                assert!((p[t * 3 * n + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_have_unit_rows_and_scale_invariant_argmax() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, Mode::Eval);
        let mut rng = sub_rng(6, "qk");
        let (qt, kt) = (Tensor::uniform(&[3, 7, 9], 1.0, &mut rng), Tensor::uniform(&[3, 7, 9], 1.0, &mut rng));
        let q = cx.tape.input(qt.clone(), false);
        let k = cx.tape.input(kt.clone(), false);
        let s = attention_scores(&mut cx, q, k).unwrap();
        let rows: Vec<Vec<f64>> = cx.tape.value(s).data().chunks(7).map(|r| r.to_vec()).collect();
        for r in &rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let argmax = |r: &[f64]| (0..r.len()).fold(0, |a, j| if r[j] > r[a] { j } else { a });
        for c in [0.1, 2.0, 5.0] {
            let qc = cx.tape.input(qt.map(|x| x * c), false);
            let kc = cx.tape.input(kt.map(|x| x * c), false);
            let l = attention_logits(&mut cx, qc, kc).unwrap();
            let l0 = attention_logits(&mut cx, q, k).unwrap();
            let (l, l0) = (cx.tape.value(l).clone(), cx.tape.value(l0).clone());
            for (a, b) in l.data().iter().zip(l0.data()) {
                assert!((a - c * c * b).abs() < 1e-12);
            }
            let sc = attention_scores(&mut cx, qc, kc).unwrap();
            for (row, base) in cx.tape.value(sc).data().chunks(7).zip(&rows) {
                assert_eq!(argmax(row), argmax(base));
            }
        }

        let zero = cx.tape.input(Tensor::zeros(&[1, 4, 3]), false);
        let s = attention_scores(&mut cx, zero, zero).unwrap();
        assert!(cx.tape.value(s).data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn shared_channel_gives_symmetric_logits() {
        let f = fixture(&SkeletonTopology::default_for(4).unwrap(), 5, true, 7);
        assert!(f.ngc.key.is_none());
        let (_, h) = encoder_like(5, 2, 4, 8);
        let mut cx = Ctx::new(&f.store, Mode::Train);
        let h = cx.tape.input(h, false);
        let q = f.ngc.query.forward(&mut cx, h).unwrap();
        let l = attention_logits(&mut cx, q, q).unwrap();
        let l = cx.tape.value(l).data();
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(l[(b * 5 + i) * 5 + j], l[(b * 5 + j) * 5 + i]);
                }
            }
        }
    }

    #[test]
    fn joint_permutation_permutes_feature_map() {
        let (tau, batch, n) = (5, 2, 6);
        let topo = SkeletonTopology::default_for(n).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let a = fixture(&topo, tau, false, 9);
        let b = fixture(&topo.permuted(&perm), tau, false, 9);
        let (o, h) = encoder_like(tau, batch, n, 10);
        let permute = |t: &Tensor, w: usize| {
            let mut out = t.clone();
            for row in 0..tau * batch {
                for j in 0..n {
                    for c in 0..w {
                        out.data_mut()[(row * n + perm[j]) * w + c] = t.data()[(row * n + j) * w + c];
                    }
                }
            }
            out
        };
        let run = |f: &Fixture, o: &Tensor, h: &Tensor| {
            let mut cx = Ctx::new(&f.store, Mode::Train);
            let enc = bind(&mut cx, o, h);
            let out = f.ngc.forward(&mut cx, &enc).unwrap();
            cx.tape.value(out.p).clone()
        };
        let p = run(&a, &o, &h);
        let p_perm = run(&b, &permute(&o, 16), &permute(&h, 8));
        assert!(permute(&p, 3).max_abs_diff(&p_perm) < 1e-12);
    }

    #[test]
    fn gradients_reach_all_three_channels() {
        let f = fixture(&SkeletonTopology::default_for(4).unwrap(), 5, false, 11);
        let (o, h) = encoder_like(5, 2, 4, 12);
        let mut cx = Ctx::new(&f.store, Mode::Train);
        let enc = bind(&mut cx, &o, &h);
        let out = f.ngc.forward(&mut cx, &enc).unwrap();
        let loss = weighted_sum(&mut cx.tape, out.p).unwrap();
        let grads = cx.tape.backward(loss).unwrap();
        let mut g = f.store.clone();
        grads.accumulate_into(&mut g);
        for ch in [&f.ngc.query, f.ngc.key.as_ref().unwrap(), &f.ngc.value] {
            for id in [ch.res.first.weight, ch.res.second.weight] {
                let grad = g.get(id).grad.as_ref().unwrap();
                assert!(grad.data().iter().any(|&x| x != 0.0), "{}", g.get(id).name);
            }
        }
    }
}
