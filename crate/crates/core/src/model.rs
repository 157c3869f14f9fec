//! Full network: encoder, feature map and the two decoders over one
//! parameter store.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::attention::{FeatureMap, NgcAttention, OutputProjection};
use crate::encoder::Encoder;
use crate::layers::{Ctx, Init, Mode, TC_HIDDEN};
use crate::motion::{DecodeMode, MotionDecoder};
use crate::recognition::{path_mode, RecognitionHead};
use crate::rng::sub_rng;
use crate::skeleton::{normalize, GraphError, GraphMode, SkeletonTopology};
use crate::tensor::{ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Encoder output projected to the feature map, no attention.
    NoNgc,
    /// Single-direction LSTM of matched width in the encoder.
    NoBilstm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoNgc, Variant::NoBilstm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNgc => "no-ngc",
            Variant::NoBilstm => "no-bilstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, no-ngc or no-bilstm)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_joints: usize,
    /// Observed frames.
    pub tau: usize,
    /// Predicted frames during training.
    pub horizon: usize,
    pub n_labels: usize,
    pub graph: GraphMode,
    pub variant: Variant,
    pub shared_qk: bool,
    pub batchnorm: bool,
    pub tc_hidden: usize,
}

impl ModelConfig {
    pub fn new(n_joints: usize, tau: usize, horizon: usize, n_labels: usize) -> Self {
        Self {
            n_joints,
            tau,
            horizon,
            n_labels,
            graph: GraphMode::Skeleton,
            variant: Variant::Full,
            shared_qk: false,
            batchnorm: true,
            tc_hidden: TC_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_joints < 2 {
            return bad("need at least 2 joints");
        }
        if self.tau < 2 {
            return bad("tau must be at least 2");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.n_labels < 1 {
            return bad("need at least 1 label");
        }
        if self.tc_hidden < 1 {
            return bad("tc_hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[horizon, B, N, 3]`.
    pub prediction: Var,
    /// `[τ, B, L]` per-frame label scores.
    pub unary: Var,
    /// `[τ, B, N, 3]` feature map.
    pub p: Var,
    pub scores: Option<Var>,
}

/// Predicted poses and labels from one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[horizon, B, N, 3]`.
    pub poses: Tensor,
    /// Viterbi path per sample.
    pub paths: Vec<Vec<usize>>,
    /// Sequence label per sample.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SkeletonTopology,
    pub labels: Vec<String>,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub features: FeatureMap,
    pub motion: MotionDecoder,
    pub recognition: RecognitionHead,
}

impl Model {
    /// Builds and initializes a model; parameters come from the `init`
    /// sub-stream of `seed`.
    pub fn new(config: ModelConfig, topology: SkeletonTopology, labels: Vec<String>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if topology.n_joints() != config.n_joints {
            return Err(ModelError::Config(format!(
                "topology has {} joints, config {}",
                topology.n_joints(),
                config.n_joints
            )));
        }
        if labels.len() != config.n_labels {
            return Err(ModelError::Config(format!(
                "{} label names for {} labels",
                labels.len(),
                config.n_labels
            )));
        }
        let graph = match config.graph {
            GraphMode::Skeleton => topology.clone(),
            GraphMode::Full => SkeletonTopology::fully_connected(config.n_joints),
        };
        let adj = normalize(&graph)?;
        let mut params = ParamStore::new();
        let mut rng = sub_rng(seed, "init");
        let mut init = Init::new(&mut params, &mut rng);
        let (n, tau) = (config.n_joints, config.tau);
        let encoder = Encoder::new(
            &mut init.scope("encoder"),
            &adj,
            config.variant != Variant::NoBilstm,
            config.batchnorm,
        );
        let features = match config.variant {
            Variant::NoNgc => FeatureMap::Projection(OutputProjection::new(&mut init.scope("proj"), n)),
            _ => FeatureMap::Ngc(NgcAttention::new(
                &mut init.scope("ngc"),
                &adj,
                tau,
                config.tc_hidden,
                config.shared_qk,
                config.batchnorm,
            )),
        };
        let motion = MotionDecoder::new(&mut init.scope("motion"), n);
        let recognition = RecognitionHead::new(&mut init.scope("recog"), n, tau, config.tc_hidden, config.n_labels);
        Ok(Self {
            config,
            topology,
            labels,
            params,
            encoder,
            features,
            motion,
            recognition,
        })
    }

    /// Full forward pass on `x_prev` (`[τ, B, N, 3]`).
    pub fn forward(&self, cx: &mut Ctx<'_>, x_prev: &Tensor, horizon: usize, mode: DecodeMode<'_>) -> Result<ForwardOutput, ModelError> {
        let shape = x_prev.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[0] != c.tau || shape[2] != c.n_joints || shape[3] != 3 {
            return Err(ModelError::Config(format!(
                "input shape {shape:?} does not match [{}, B, {}, 3]",
                c.tau, c.n_joints
            )));
        }
        let x = cx.constant(x_prev.clone());
        let enc = self.encoder.encode(cx, x)?;
        let att = self.features.forward(cx, &enc)?;
        let last = cx.tape.slice(x, 0, c.tau - 1, 1)?;
        let prediction = self.motion.predict(cx, att.p, last, horizon, mode)?;
        let unary = self.recognition.forward(cx, att.p)?;
        Ok(ForwardOutput {
            prediction,
            unary,
            p: att.p,
            scores: att.scores,
        })
    }

    /// Eval-mode prediction and classification.
    pub fn infer(&self, x_prev: &Tensor, horizon: usize) -> Result<Inference, ModelError> {
        let mut cx = Ctx::new(&self.params, Mode::Eval);
        let out = self.forward(&mut cx, x_prev, horizon, DecodeMode::Inference)?;
        let poses = cx.tape.value(out.prediction).clone();
        let unary = cx.tape.value(out.unary);
        let (tau, batch, l) = (unary.shape()[0], unary.shape()[1], unary.shape()[2]);
        let crf = self.recognition.crf(&self.params);
        let mut paths = Vec::with_capacity(batch);
        for b in 0..batch {
            let u: Vec<f64> = (0..tau)
                .flat_map(|t| unary.data()[(t * batch + b) * l..(t * batch + b + 1) * l].iter().copied())
                .collect();
            let (path, _) = crf.viterbi(&u).map_err(|e| ModelError::Config(e.to_string()))?;
            paths.push(path);
        }
        let labels = paths.iter().map(|p| path_mode(p, l)).collect();
        Ok(Inference { poses, paths, labels })
    }
}
