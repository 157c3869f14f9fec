//! Per-joint embedding, graph convolution and a stacked LSTM over frames.

use crate::layers::{Ctx, GcnLayer, Init, Linear, LstmStack};
use crate::skeleton::NormalizedAdjacency;
use crate::tensor::{invalid, Result, Var};

/// Width of the graph-convolved per-joint features fed to the LSTM.
pub const GCN_WIDTH: usize = 8;
/// Per-joint hidden width of each LSTM direction.
pub const HIDDEN_PER_JOINT: usize = 8;
pub const LSTM_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[τ, B, N·16]`: both directions of the top layer, concatenated.
    pub o: Var,
    /// `[τ, B, N·8]`: top-layer hidden states with the directions summed.
    pub h: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub gcn: GcnLayer,
    pub lstm: LstmStack,
    pub n_joints: usize,
}

impl Encoder {
    /// `bidirectional = false` swaps in a single-direction LSTM of matched
    /// output width.
    pub fn new(init: &mut Init<'_>, adjacency: &NormalizedAdjacency, bidirectional: bool, batchnorm: bool) -> Self {
        let n = adjacency.n();
        Self {
            embed: Linear::new(&mut init.scope("embed"), 3, 3, true),
            gcn: GcnLayer::new(&mut init.scope("gcn"), adjacency, 3, GCN_WIDTH, batchnorm),
            lstm: LstmStack::new(
                &mut init.scope("lstm"),
                n * GCN_WIDTH,
                n * HIDDEN_PER_JOINT,
                LSTM_LAYERS,
                bidirectional,
            ),
            n_joints: n,
        }
    }

    /// Shared 3→3 map applied to every joint of every frame.
    pub fn embed(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.embed.forward(cx, x)
    }

    /// `[τ, B, N, 3] -> [τ, B, N·8]`.
    pub fn graph(&self, cx: &mut Ctx<'_>, e: Var) -> Result<Var> {
        let shape = cx.tape.shape(e).to_vec();
        let (tau, batch, n) = (shape[0], shape[1], self.n_joints);
        let rows = cx.tape.reshape(e, &[tau * batch, n, 3])?;
        let g = self.gcn.forward(cx, rows)?;
        cx.tape.reshape(g, &[tau, batch, n * GCN_WIDTH])
    }

    pub fn encode(&self, cx: &mut Ctx<'_>, x_prev: Var) -> Result<EncoderOutput> {
        let shape = cx.tape.shape(x_prev).to_vec();
        if shape.len() != 4 || shape[2] != self.n_joints || shape[3] != 3 {
            return Err(invalid(
                "encode",
                format!("expected [τ, B, {}, 3], got {shape:?}", self.n_joints),
            ));
        }
        if shape[0] < 2 {
            return Err(invalid("encode", format!("need at least 2 observed frames, got {}", shape[0])));
        }
        let e = self.embed(cx, x_prev)?;
        let g = self.graph(cx, e)?;
        let out = self.lstm.forward(cx, g)?;
        Ok(EncoderOutput {
            o: out.outputs,
            h: out.hidden,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::rng::sub_rng;
    use crate::skeleton::{normalize, SkeletonTopology};
    use crate::tensor::{ParamStore, Tensor};

    fn build(n: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "init");
        let adj = normalize(&SkeletonTopology::default_for(n).unwrap()).unwrap();
        let enc = Encoder::new(&mut Init::new(&mut store, &mut rng), &adj, true, true);
        (store, enc)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut sub_rng(seed, "x"))
    }

    #[test]
    fn zero_model_on_zero_input_is_silent() {
        let (mut store, enc) = build(5, 0);
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut cx = Ctx::new(&store, Mode::Train);
        let x = cx.tape.input(Tensor::zeros(&[4, 2, 5, 3]), false);
        let out = enc.encode(&mut cx, x).unwrap();
        assert!(cx.tape.value(out.o).data().iter().all(|&v| v == 0.0));
        assert!(cx.tape.value(out.h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_widths_for_seventeen_joints() {
        let (store, enc) = build(17, 1);
        let mut cx = Ctx::new(&store, Mode::Train);
        let x = cx.tape.input(input(&[10, 1, 17, 3], 2), false);
        let out = enc.encode(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(out.o), &[10, 1, 272]);
        assert_eq!(cx.tape.shape(out.h), &[10, 1, 136]);
    }

    #[test]
    fn encode_is_the_three_stages_in_order() {
        let (store, enc) = build(5, 3);
        let x = input(&[4, 3, 5, 3], 4);
        let mut cx = Ctx::new(&store, Mode::Train);
        let v = cx.tape.input(x.clone(), false);
        let out = enc.encode(&mut cx, v).unwrap();

        let mut manual = Ctx::new(&store, Mode::Train);
        let v = manual.tape.input(x, false);
        let w = manual.param(enc.embed.weight);
        let e = manual.tape.matmul(v, w).unwrap();
        let b = manual.param(enc.embed.bias.unwrap());
        let e = manual.tape.add(e, b).unwrap();
        let rows = manual.tape.reshape(e, &[12, 5, 3]).unwrap();
        let g = enc.gcn.forward(&mut manual, rows).unwrap();
        let g = manual.tape.reshape(g, &[4, 3, 40]).unwrap();
        let stack = enc.lstm.forward(&mut manual, g).unwrap();
        assert_eq!(cx.tape.value(out.o), manual.tape.value(stack.outputs));
        assert_eq!(cx.tape.value(out.h), manual.tape.value(stack.hidden));
    }

    #[test]
    fn encode_is_deterministic_and_reaches_embedding() {
        let (store, enc) = build(5, 5);
        let x = input(&[4, 2, 5, 3], 6);
        let run = || {
            let mut cx = Ctx::new(&store, Mode::Train);
            let v = cx.tape.input(x.clone(), false);
            let out = enc.encode(&mut cx, v).unwrap();
            let loss = cx.tape.sum(out.o);
            let grads = cx.tape.backward(loss).unwrap();
            let mut g = store.clone();
            grads.accumulate_into(&mut g);
            (cx.tape.value(out.o).clone(), g.get(enc.embed.weight).grad.clone().unwrap())
        };
        let (o1, g1) = run();
        let (o2, g2) = run();
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
        assert!(g1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_wrong_joint_count_and_single_frame() {
        let (store, enc) = build(5, 0);
        let mut cx = Ctx::new(&store, Mode::Train);
        let x = cx.tape.input(Tensor::zeros(&[4, 1, 6, 3]), false);
        assert!(enc.encode(&mut cx, x).is_err());
        let x = cx.tape.input(Tensor::zeros(&[1, 1, 5, 3]), false);
        assert!(enc.encode(&mut cx, x).is_err());
    }
}
