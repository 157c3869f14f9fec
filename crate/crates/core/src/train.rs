//! Training configuration, the epoch loop and evaluation against the
//! zero-velocity baseline.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::data::{horizon_ms, mae, split, windows, zerov_baseline, Batch, ConfusionMatrix, DataError, Dataset, Window};
use crate::layers::{apply_running_updates, Ctx, Mode};
use crate::loss::{combined_loss, prediction_loss};
use crate::model::{Model, ModelConfig, ModelError};
use crate::motion::{DecodeMode, TeacherForcingSchedule, TF_DECAY};
use crate::recognition::{crf_nll, path_mode, CRF_L2};
use crate::rng::{sub_rng_indexed, Rng};
use crate::tensor::{AdamConfig, AdamState, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training windows: {0}")]
    EmptyDataset(String),
    #[error("sequence {0} has no label; training needs labeled data")]
    Unlabeled(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics log {}: {source}", path.display())]
    Metrics {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the prediction loss; recognition gets `1 − λ`.
    pub lambda: f64,
    pub huber_beta: f64,
    /// Weight of the unit-sphere penalty on predicted joints.
    pub gamma_p: f64,
    pub lr: f64,
    /// Learning rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub tf_decay: f64,
    /// L2 weight on the CRF transition matrix.
    pub crf_alpha: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            huber_beta: 1.0,
            gamma_p: 0.1,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 10,
            batch_size: 16,
            epochs: 100,
            tf_decay: TF_DECAY,
            crf_alpha: CRF_L2,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 10] = [
            ((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]"),
            (self.huber_beta > 0.0 && self.huber_beta.is_finite(), "huber_beta must be positive"),
            (self.gamma_p >= 0.0 && self.gamma_p.is_finite(), "gamma_p must be non-negative"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must lie in (0, 1]"),
            (self.lr_decay_every >= 1, "lr_decay_every must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.tf_decay > 0.0 && self.tf_decay <= 1.0, "tf_decay must lie in (0, 1]"),
            (self.crf_alpha >= 0.0 && self.crf_alpha.is_finite(), "crf_alpha must be non-negative"),
            ((0.0..1.0).contains(&self.val_fraction), "val_fraction must lie in [0, 1)"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn schedule(&self) -> TeacherForcingSchedule {
        TeacherForcingSchedule::new(self.tf_decay)
    }
}

/// `lr · lr_decay^⌊epoch / lr_decay_every⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation loss so far.
    pub best_val: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub l_pred: f64,
    pub l_rec: f64,
    pub loss: f64,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub tf_p: f64,
    pub l_pred: f64,
    pub l_rec: f64,
    pub loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_accuracy: f64,
    #[serde(skip)]
    pub improved: bool,
}

pub const METRICS_HEADER: &str = "epoch,lr,tf_p,l_pred,l_rec,loss,val_loss,val_mae,val_accuracy";

/// Per-frame label paths: every frame carries its window's sequence label.
fn label_paths(batch: &Batch, ws: &[Window], tau: usize) -> Result<Vec<Vec<usize>>> {
    batch
        .labels
        .iter()
        .zip(ws)
        .map(|(l, w)| {
            l.map(|y| vec![y; tau]).ok_or(TrainError::Unlabeled(w.sequence))
        })
        .collect()
}

pub struct Trainer {
    pub state: TrainState,
    pub train_windows: Vec<Window>,
    pub val_windows: Vec<Window>,
    pending_updates: Vec<(crate::tensor::ParamId, Vec<f64>)>,
}

impl Trainer {
    /// Fresh model and optimizer; parameters seeded from `cfg.seed`.
    pub fn new(ds: &Dataset, model_config: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_config, ds.topology.clone(), ds.labels.clone(), cfg.seed)?;
        let adam = AdamState::new(&model.params, AdamConfig::default());
        Self::resume(
            ds,
            TrainState {
                model,
                config: cfg,
                adam,
                epoch: 0,
                best_val: None,
            },
        )
    }

    /// Continues from a saved state. Window split is recomputed from the seed.
    pub fn resume(ds: &Dataset, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let mc = &state.model.config;
        if ds.n_joints() != mc.n_joints || ds.labels != state.model.labels {
            return Err(ModelError::Config(format!(
                "dataset has {} joints and labels {:?}, model {} and {:?}",
                ds.n_joints(),
                ds.labels,
                mc.n_joints,
                state.model.labels
            ))
            .into());
        }
        if let Some(i) = ds.sequences.iter().position(|s| s.label.is_none()) {
            return Err(TrainError::Unlabeled(i));
        }
        let all = windows(ds, mc.tau, mc.horizon)?;
        if all.is_empty() {
            return Err(TrainError::EmptyDataset("dataset has no sequences".into()));
        }
        let (train_windows, val_windows) = split(&all, state.config.val_fraction, state.config.seed);
        Ok(Self {
            state,
            train_windows,
            val_windows,
            pending_updates: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    /// Forward and backward on one batch in train mode. Gradients are left in
    /// the parameter store; call [`Trainer::apply`] to take the step.
    pub fn gradients(&mut self, batch: &Batch, ws: &[Window], tf_p: f64, coins: &mut Rng) -> Result<BatchLoss> {
        let cfg = &self.state.config;
        let model = &self.state.model;
        let tau = model.config.tau;
        let horizon = batch.x_fut.shape()[0];
        let paths = label_paths(batch, ws, tau)?;
        let mut cx = Ctx::new(&model.params, Mode::Train);
        let mode = DecodeMode::Training {
            p: tf_p,
            truth: &batch.x_fut,
            rng: coins,
        };
        let out = model.forward(&mut cx, &batch.x_prev, horizon, mode)?;
        let truth = cx.constant(batch.x_fut.clone());
        let l_pred = prediction_loss(&mut cx.tape, out.prediction, truth, cfg.huber_beta, cfg.gamma_p)?;
        let w = cx.param(model.recognition.transitions);
        let l_rec = crf_nll(&mut cx, out.unary, w, &paths, cfg.crf_alpha)?;
        let loss = combined_loss(&mut cx.tape, l_pred, l_rec, cfg.lambda)?;
        let values = BatchLoss {
            l_pred: cx.tape.value(l_pred).item(),
            l_rec: cx.tape.value(l_rec).item(),
            loss: cx.tape.value(loss).item(),
        };
        if !values.loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: self.state.epoch,
                batch: 0,
            });
        }
        let grads = cx.tape.backward(loss)?;
        self.pending_updates = cx.take_running_updates();
        drop(cx);
        let params = &mut self.state.model.params;
        params.zero_grads();
        grads.accumulate_into(params);
        Ok(values)
    }

    /// Adam step with the stored gradients, then batchnorm running statistics.
    pub fn apply(&mut self, lr: f64) -> Result<()> {
        let params = &mut self.state.model.params;
        self.state.adam.step(params, lr)?;
        apply_running_updates(params, std::mem::take(&mut self.pending_updates));
        Ok(())
    }

    /// One pass over the shuffled training windows followed by validation.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochMetrics> {
        let e = self.state.epoch;
        let cfg = self.state.config.clone();
        let (tau, horizon) = (self.state.model.config.tau, self.state.model.config.horizon);
        let tf_p = cfg.schedule().p(e);
        let lr = lr_at_epoch(&cfg, e);
        let mut order = self.train_windows.clone();
        order.shuffle(&mut sub_rng_indexed(cfg.seed, "shuffle", e as u64));
        let mut coins = sub_rng_indexed(cfg.seed, "coins", e as u64);
        let mut sum = BatchLoss::default();
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::gather(ds, chunk, tau, horizon)?;
            let l = self.gradients(&batch, chunk, tf_p, &mut coins).map_err(|err| match err {
                TrainError::NonFinite { epoch, .. } => TrainError::NonFinite { epoch, batch: i },
                other => other,
            })?;
            self.apply(lr)?;
            let w = chunk.len() as f64;
            sum.l_pred += l.l_pred * w;
            sum.l_rec += l.l_rec * w;
            sum.loss += l.loss * w;
        }
        self.state.epoch += 1;

        let held_out = if self.val_windows.is_empty() {
            &self.train_windows
        } else {
            &self.val_windows
        };
        let val = validate(&self.state.model, &cfg, ds, held_out)?;
        let improved = self.state.best_val.is_none_or(|b| val.loss < b);
        if improved {
            self.state.best_val = Some(val.loss);
        }
        let n = order.len() as f64;
        Ok(EpochMetrics {
            epoch: e,
            lr,
            tf_p,
            l_pred: sum.l_pred / n,
            l_rec: sum.l_rec / n,
            loss: sum.loss / n,
            val_loss: val.loss,
            val_mae: val.mae,
            val_accuracy: val.accuracy,
            improved,
        })
    }
}

/// Eval-mode losses and metrics over a set of windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub l_pred: f64,
    pub l_rec: f64,
    pub loss: f64,
    /// MAE at the last predicted frame.
    pub mae: f64,
    pub accuracy: f64,
}

const EVAL_BATCH: usize = 64;

pub fn validate(model: &Model, cfg: &TrainConfig, ds: &Dataset, ws: &[Window]) -> Result<Validation> {
    if ws.is_empty() {
        return Err(TrainError::EmptyDataset("no validation windows".into()));
    }
    let (tau, horizon) = (model.config.tau, model.config.horizon);
    let crf = model.recognition.crf(&model.params);
    let mut acc = Validation {
        l_pred: 0.0,
        l_rec: 0.0,
        loss: 0.0,
        mae: 0.0,
        accuracy: 0.0,
    };
    for chunk in ws.chunks(EVAL_BATCH) {
        let batch = Batch::gather(ds, chunk, tau, horizon)?;
        let paths = label_paths(&batch, chunk, tau)?;
        let mut cx = Ctx::new(&model.params, Mode::Eval);
        let out = model.forward(&mut cx, &batch.x_prev, horizon, DecodeMode::Inference)?;
        let truth = cx.constant(batch.x_fut.clone());
        let l_pred = prediction_loss(&mut cx.tape, out.prediction, truth, cfg.huber_beta, cfg.gamma_p)?;
        let w = cx.param(model.recognition.transitions);
        let l_rec = crf_nll(&mut cx, out.unary, w, &paths, cfg.crf_alpha)?;
        let loss = combined_loss(&mut cx.tape, l_pred, l_rec, cfg.lambda)?;
        let b = chunk.len() as f64;
        acc.l_pred += cx.tape.value(l_pred).item() * b;
        acc.l_rec += cx.tape.value(l_rec).item() * b;
        acc.loss += cx.tape.value(loss).item() * b;
        acc.mae += mae(cx.tape.value(out.prediction), &batch.x_fut, &[horizon])?[0] * b;
        let predicted = classify(&crf, cx.tape.value(out.unary))?;
        let correct = predicted.iter().zip(&paths).filter(|(p, t)| **p == t[0]).count();
        acc.accuracy += correct as f64;
    }
    let n = ws.len() as f64;
    Ok(Validation {
        l_pred: acc.l_pred / n,
        l_rec: acc.l_rec / n,
        loss: acc.loss / n,
        mae: acc.mae / n,
        accuracy: acc.accuracy / n,
    })
}

/// Viterbi path mode for each sample of a `[τ, B, L]` unary tensor.
fn classify(crf: &crate::recognition::Crf, unary: &crate::tensor::Tensor) -> Result<Vec<usize>> {
    let (tau, batch, l) = (unary.shape()[0], unary.shape()[1], unary.shape()[2]);
    (0..batch)
        .map(|b| {
            let u: Vec<f64> = (0..tau)
                .flat_map(|t| unary.data()[(t * batch + b) * l..(t * batch + b + 1) * l].iter().copied())
                .collect();
            let (path, _) = crf.viterbi(&u).map_err(|e| ModelError::Config(e.to_string()))?;
            Ok(path_mode(&path, l))
        })
        .collect()
}

/// Where [`train`] writes its outputs. The best-validation checkpoint goes to
/// `checkpoint`, the latest state to `checkpoint` with `.last` appended.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub fn last_checkpoint_path(best: &Path) -> PathBuf {
    let mut s = best.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

/// Runs epochs until `state.config.epochs` are complete. A zero-epoch run
/// still writes the initialized checkpoint.
pub fn train(trainer: &mut Trainer, ds: &Dataset, out: &TrainOutputs, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
    let mut log = match &out.metrics {
        Some(path) => {
            let resuming = trainer.state.epoch > 0 && path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(resuming)
                .write(true)
                .truncate(!resuming)
                .open(path)
                .map_err(|e| TrainError::Metrics {
                    path: path.clone(),
                    source: e.into(),
                })?;
            Some((path.clone(), csv::WriterBuilder::new().has_headers(!resuming).from_writer(file)))
        }
        None => None,
    };
    if let Some(path) = &out.checkpoint {
        if trainer.state.epoch == 0 {
            save_checkpoint(path, &trainer.state)?;
            save_checkpoint(&last_checkpoint_path(path), &trainer.state)?;
        }
    }
    let mut history = Vec::new();
    while trainer.state.epoch < trainer.state.config.epochs {
        let m = trainer.run_epoch(ds)?;
        if let Some((path, w)) = &mut log {
            let err = |source| TrainError::Metrics { path: path.clone(), source };
            w.serialize(&m).map_err(err)?;
            w.flush().map_err(|e| err(e.into()))?;
        }
        if let Some(path) = &out.checkpoint {
            if m.improved {
                save_checkpoint(path, &trainer.state)?;
            }
            save_checkpoint(&last_checkpoint_path(path), &trainer.state)?;
        }
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// One horizon of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub frames: usize,
    pub ms: f64,
    pub model_mae: f64,
    pub zerov_mae: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `None` when no window is labeled.
    pub accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub n_windows: usize,
}

/// Model and zero-velocity MAE at each horizon (in frames, 1-based), plus
/// recognition accuracy over labeled windows.
pub fn evaluate(model: &Model, ds: &Dataset, ws: &[Window], horizons: &[usize]) -> Result<EvalReport> {
    if ws.is_empty() {
        return Err(TrainError::EmptyDataset("no evaluation windows".into()));
    }
    if ds.n_joints() != model.config.n_joints {
        return Err(ModelError::Config(format!(
            "dataset has {} joints, model expects {}",
            ds.n_joints(),
            model.config.n_joints
        ))
        .into());
    }
    let horizon = *horizons
        .iter()
        .max()
        .ok_or_else(|| TrainError::Config("no horizons requested".into()))?;
    if horizons.contains(&0) {
        return Err(TrainError::Config("horizons are 1-based".into()));
    }
    let tau = model.config.tau;
    let mut model_sum = vec![0.0; horizons.len()];
    let mut zerov_sum = vec![0.0; horizons.len()];
    let mut confusion = ConfusionMatrix::new(model.labels.clone());
    for chunk in ws.chunks(EVAL_BATCH) {
        let batch = Batch::gather(ds, chunk, tau, horizon)?;
        let inf = model.infer(&batch.x_prev, horizon)?;
        let zv = zerov_baseline(&batch.x_prev, horizon);
        let b = chunk.len() as f64;
        for (i, (m, z)) in mae(&inf.poses, &batch.x_fut, horizons)?
            .into_iter()
            .zip(mae(&zv, &batch.x_fut, horizons)?)
            .enumerate()
        {
            model_sum[i] += m * b;
            zerov_sum[i] += z * b;
        }
        for (truth, pred) in batch.labels.iter().zip(&inf.labels) {
            if let Some(t) = truth {
                confusion.add(*t, *pred);
            }
        }
    }
    let n = ws.len() as f64;
    let rows = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| EvalRow {
            frames: h,
            ms: horizon_ms(h, ds.fps),
            model_mae: model_sum[i] / n,
            zerov_mae: zerov_sum[i] / n,
        })
        .collect();
    let total = confusion.total();
    let accuracy = (total > 0).then(|| confusion.correct() as f64 / total as f64);
    Ok(EvalReport {
        rows,
        accuracy,
        confusion,
        n_windows: ws.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
    use crate::data::{generate_synthetic, PoseSequence, SynthConfig};
    use crate::rng::sub_rng;
    use crate::skeleton::SkeletonTopology;
    use crate::tensor::Tensor;

    pub(crate) fn tiny_data(seed: u64) -> Dataset {
        generate_synthetic(&SynthConfig::new(2, 3, 5, 14, seed)).unwrap()
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            tc_hidden: 8,
            ..ModelConfig::new(5, 4, 3, 2)
        }
    }

    fn tiny_train(lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            batch_size: 4,
            epochs: 3,
            seed: 7,
            val_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 9), 0.001);
        assert!((lr_at_epoch(&cfg, 10) - 0.0001).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 25) - 0.00001).abs() < 1e-18);
        let slow = TrainConfig {
            lr_decay_every: 100,
            ..cfg
        };
        assert_eq!(lr_at_epoch(&slow, 99), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lambda: 1.5, ..Default::default() },
            TrainConfig { huber_beta: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_decay_every: 0, ..Default::default() },
            TrainConfig { val_fraction: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
        }
    }

    fn grads_of(trainer: &Trainer, prefix: &str) -> Vec<f64> {
        trainer
            .model()
            .params
            .trainable()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .flat_map(|(_, p)| p.grad.as_ref().expect("grad buffer").data().to_vec())
            .collect()
    }

    fn three_steps(lambda: f64, mut check: impl FnMut(&Trainer)) {
        let ds = tiny_data(1);
        let mut t = Trainer::new(&ds, tiny_model(), tiny_train(lambda)).unwrap();
        let ws = t.train_windows.clone();
        let mut coins = sub_rng(0, "coins");
        for chunk in ws.chunks(4).take(3) {
            let batch = Batch::gather(&ds, chunk, 4, 3).unwrap();
            t.gradients(&batch, chunk, 0.5, &mut coins).unwrap();
            check(&t);
            t.apply(1e-3).unwrap();
        }
    }

    #[test]
    fn lambda_one_silences_recognition_head() {
        three_steps(1.0, |t| {
            assert!(grads_of(t, "recog.").iter().all(|&g| g == 0.0));
            assert!(grads_of(t, "motion.").iter().any(|&g| g != 0.0));
        });
    }

    #[test]
    fn lambda_zero_silences_motion_decoder() {
        three_steps(0.0, |t| {
            assert!(grads_of(t, "motion.").iter().all(|&g| g == 0.0));
            assert!(grads_of(t, "encoder.").iter().any(|&g| g != 0.0));
            assert!(grads_of(t, "recog.").iter().any(|&g| g != 0.0));
        });
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = tiny_data(2);
        let run = || {
            let mut t = Trainer::new(&ds, tiny_model(), tiny_train(0.4)).unwrap();
            train(&mut t, &ds, &TrainOutputs::default(), |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let ds = tiny_data(3);
        let mut full = Trainer::new(&ds, tiny_model(), tiny_train(0.4)).unwrap();
        let uninterrupted = train(&mut full, &ds, &TrainOutputs::default(), |_| {}).unwrap();

        let mut first = Trainer::new(&ds, tiny_model(), TrainConfig { epochs: 2, ..tiny_train(0.4) }).unwrap();
        train(&mut first, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        let mut state = decode_checkpoint(&encode_checkpoint(&first.state)).unwrap();
        state.config.epochs = 3;
        let mut resumed = Trainer::resume(&ds, state).unwrap();
        let tail = train(&mut resumed, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(tail, uninterrupted[2..]);
        assert_eq!(resumed.state.model.params, full.state.model.params);
    }

    #[test]
    fn constant_future_drives_motion_toward_zero_displacement() {
        let topo = SkeletonTopology::default_for(5).unwrap();
        let pose: Vec<f64> = crate::data::rest_pose(5).into_iter().flatten().collect();
        let sequences = (0..8)
            .map(|i| {
                let frames = pose.iter().copied().cycle().take(14 * 15).collect();
                PoseSequence::new(frames, 5, Some(format!("c{}", i % 2))).unwrap()
            })
            .collect();
        let ds = Dataset {
            topology: topo,
            sequences,
            labels: vec!["c0".into(), "c1".into()],
            fps: 25.0,
        };
        let cfg = TrainConfig {
            lambda: 1.0,
            epochs: 10,
            ..tiny_train(1.0)
        };
        let mut t = Trainer::new(&ds, tiny_model(), cfg).unwrap();
        let log = train(&mut t, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        assert!(log[9].l_pred < log[0].l_pred, "{} vs {}", log[9].l_pred, log[0].l_pred);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = tiny_data(4);
        let mut t = Trainer::new(&ds, tiny_model(), tiny_train(0.4)).unwrap();
        let id = t.model().recognition.unary.weight;
        t.state.model.params.get_mut(id).value.data_mut()[0] = f64::NAN;
        assert!(matches!(t.run_epoch(&ds), Err(TrainError::NonFinite { epoch: 0, batch: 0 })));
    }

    #[test]
    fn unlabeled_data_is_rejected() {
        let mut ds = tiny_data(5);
        ds.sequences[4].label = None;
        assert!(matches!(
            Trainer::new(&ds, tiny_model(), tiny_train(0.4)),
            Err(TrainError::Unlabeled(4))
        ));
    }

    #[test]
    fn too_short_sequences_are_reported() {
        let ds = generate_synthetic(&SynthConfig::new(2, 2, 5, 6, 0)).unwrap();
        assert!(matches!(
            Trainer::new(&ds, tiny_model(), tiny_train(0.4)),
            Err(TrainError::Data(DataError::TooShort { needed: 7, .. }))
        ));
    }

    #[test]
    fn train_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ngcm");
        let metrics = dir.path().join("m.csv");
        let out = TrainOutputs {
            checkpoint: Some(ckpt.clone()),
            metrics: Some(metrics.clone()),
        };
        let ds = tiny_data(6);
        let mut t = Trainer::new(&ds, tiny_model(), TrainConfig { epochs: 0, ..tiny_train(1.0) }).unwrap();
        assert!(train(&mut t, &ds, &out, |_| {}).unwrap().is_empty());
        let init = crate::checkpoint::load_checkpoint(&ckpt).unwrap();
        assert_eq!(init.epoch, 0);
        assert_eq!(init.model.params, t.state.model.params);

        let mut t = Trainer::new(&ds, tiny_model(), TrainConfig { epochs: 2, ..tiny_train(1.0) }).unwrap();
        let log = train(&mut t, &ds, &out, |_| {}).unwrap();
        let text = std::fs::read_to_string(&metrics).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        for m in &log {
            // λ = 1 leaves only the prediction term in the combined loss
            assert_eq!(m.loss, m.l_pred);
        }
        let last = crate::checkpoint::load_checkpoint(&last_checkpoint_path(&ckpt)).unwrap();
        assert_eq!(last.epoch, 2);
    }

    #[test]
    fn zeroed_decoder_output_matches_zero_velocity() {
        let ds = tiny_data(8);
        let mut t = Trainer::new(&ds, tiny_model(), tiny_train(0.4)).unwrap();
        train(&mut t, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        let mut model = t.state.model.clone();
        let out = model.motion.out.clone();
        for id in std::iter::once(out.weight).chain(out.bias) {
            let shape = model.params.value(id).shape().to_vec();
            model.params.get_mut(id).value = Tensor::zeros(&shape);
        }
        let ws = windows(&ds, 4, 3).unwrap();
        let report = evaluate(&model, &ds, &ws, &[1, 2, 3]).unwrap();
        for row in &report.rows {
            assert_eq!(row.model_mae.to_bits(), row.zerov_mae.to_bits());
        }
        assert_eq!(report.rows[1].ms, 80.0);
        assert_eq!(report.confusion.total(), ws.len());
        assert!(evaluate(&model, &ds, &[], &[1]).is_err());
    }
}
