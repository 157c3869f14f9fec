//! Pose sequences, the SKEL1 file format, synthetic motion, training
//! windows and evaluation metrics.
//!
//! SKEL1 is line-delimited JSON. Line 1 is a header
//! `{"format":"SKEL1","n_joints":N,"fps":F,"labels":[...],"edges":[[i,j],...]}`
//! and every further line is one sequence `{"label":"...","frames":[[[x,y,z]; N]; T]}`
//! (the label may be omitted).

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{sub_rng, sub_rng_indexed};
use crate::skeleton::{GraphError, SkeletonTopology};
use crate::tensor::Tensor;

pub const FORMAT: &str = "SKEL1";
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed header: {msg}")]
    MalformedHeader { line: usize, msg: String },
    #[error("line {line}: malformed sequence: {msg}")]
    MalformedSequence { line: usize, msg: String },
    #[error("line {line}: sequence {sequence} has {got} joints, expected {expected}")]
    JointCount {
        line: usize,
        sequence: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: sequence {sequence} has unknown label `{label}`")]
    UnknownLabel { line: usize, sequence: usize, label: String },
    #[error("line {line}: sequence {sequence} contains a non-finite coordinate")]
    NonFinite { line: usize, sequence: usize },
    #[error("sequence {sequence} has {frames} frames, need at least {needed}")]
    TooShort { sequence: usize, frames: usize, needed: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `T × N × 3` coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<f64>,
    pub n_joints: usize,
    pub label: Option<String>,
}

impl PoseSequence {
    pub fn new(frames: Vec<f64>, n_joints: usize, label: Option<String>) -> Result<Self> {
        let per = n_joints * 3;
        if n_joints == 0 || frames.is_empty() || frames.len() % per != 0 {
            return Err(DataError::Invalid(format!(
                "{} coordinates do not form whole frames of {n_joints} joints",
                frames.len()
            )));
        }
        Ok(Self { frames, n_joints, label })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / (self.n_joints * 3)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let per = self.n_joints * 3;
        &self.frames[t * per..(t + 1) * per]
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub topology: SkeletonTopology,
    pub sequences: Vec<PoseSequence>,
    pub labels: Vec<String>,
    pub fps: f64,
}

impl Dataset {
    pub fn n_joints(&self) -> usize {
        self.topology.n_joints()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    n_joints: usize,
    fps: f64,
    labels: Vec<String>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    frames: Vec<Vec<[f64; 3]>>,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        n_joints: ds.n_joints(),
        fps: ds.fps,
        labels: ds.labels.clone(),
        edges: ds.topology.edges().iter().map(|&(a, b)| [a, b]).collect(),
        joint_names: ds.topology.joint_names().map(<[String]>::to_vec),
    };
    let io = |e: io::Error| DataError::Io {
        path: PathBuf::from("<writer>"),
        source: e,
    };
    let json = serde_json::to_string(&header).map_err(|e| DataError::Invalid(e.to_string()))?;
    writeln!(w, "{json}").map_err(io)?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        if !seq.is_finite() {
            return Err(DataError::NonFinite { line: i + 2, sequence: i });
        }
        let record = SequenceRecord {
            label: seq.label.clone(),
            frames: seq
                .frames
                .chunks(seq.n_joints * 3)
                .map(|f| f.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
                .collect(),
        };
        let json = serde_json::to_string(&record).map_err(|e| DataError::Invalid(e.to_string()))?;
        writeln!(w, "{json}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (line_no, header_line) = loop {
        match lines.next() {
            Some((_, Ok(l))) if l.trim().is_empty() => continue,
            Some((n, Ok(l))) => break (n, l),
            Some((n, Err(e))) => return Err(DataError::MalformedHeader { line: n, msg: e.to_string() }),
            None => return Err(DataError::MalformedHeader { line: 1, msg: "missing header".into() }),
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| DataError::MalformedHeader {
        line: line_no,
        msg: e.to_string(),
    })?;
    let bad_header = |msg: String| DataError::MalformedHeader { line: line_no, msg };
    if header.format != FORMAT {
        return Err(bad_header(format!("format `{}`, expected `{FORMAT}`", header.format)));
    }
    if !(header.fps.is_finite() && header.fps > 0.0) {
        return Err(bad_header(format!("fps must be positive, got {}", header.fps)));
    }
    let edges: Vec<(usize, usize)> = header.edges.iter().map(|e| (e[0], e[1])).collect();
    let mut topology = SkeletonTopology::new(header.n_joints, &edges).map_err(|e| bad_header(e.to_string()))?;
    if let Some(names) = header.joint_names {
        if names.len() != header.n_joints {
            return Err(bad_header(format!("{} joint names for {} joints", names.len(), header.n_joints)));
        }
        topology = topology.with_names(names);
    }

    let n = header.n_joints;
    let mut sequences = Vec::new();
    for (line, text) in lines {
        let text = text.map_err(|e| DataError::MalformedSequence { line, msg: e.to_string() })?;
        if text.trim().is_empty() {
            continue;
        }
        let sequence = sequences.len();
        let record: SequenceRecord = serde_json::from_str(&text).map_err(|e| {
            if ["NaN", "Infinity", "inf"].iter().any(|tok| text.contains(tok)) {
                DataError::NonFinite { line, sequence }
            } else {
                DataError::MalformedSequence { line, msg: e.to_string() }
            }
        })?;
        if record.frames.is_empty() {
            return Err(DataError::MalformedSequence { line, msg: "no frames".into() });
        }
        if let Some(f) = record.frames.iter().find(|f| f.len() != n) {
            return Err(DataError::JointCount {
                line,
                sequence,
                expected: n,
                got: f.len(),
            });
        }
        if let Some(label) = &record.label {
            if !header.labels.contains(label) {
                return Err(DataError::UnknownLabel {
                    line,
                    sequence,
                    label: label.clone(),
                });
            }
        }
        let frames: Vec<f64> = record.frames.iter().flatten().flatten().copied().collect();
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { line, sequence });
        }
        sequences.push(PoseSequence {
            frames,
            n_joints: n,
            label: record.label,
        });
    }
    Ok(Dataset {
        topology,
        sequences,
        labels: header.labels,
        fps: header.fps,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    write_dataset(ds, BufWriter::new(file)).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file))
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub n_joints: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    /// Peak swing angle in radians.
    pub amplitude: f64,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, n_joints: usize, frames: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            n_joints,
            frames,
            fps: DEFAULT_FPS,
            seed,
            amplitude: 0.3,
            noise: 0.01,
        }
    }
}

/// Seed of the class library. Class motions (per-joint phases and motion
/// directions) depend only on this, so datasets drawn with different seeds
/// share the same action classes.
pub const LIBRARY_SEED: u64 = 0x5eed_c1a5;

pub fn class_frequency(k: usize) -> f64 {
    0.5 * (k + 1) as f64
}

pub fn class_label(k: usize) -> String {
    format!("action{k}")
}

/// Unit-radius rest pose: joints spread over the sphere on a Fibonacci
/// lattice.
pub fn rest_pose(n_joints: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n_joints)
        .map(|j| {
            let y = 1.0 - 2.0 * (j as f64 + 0.5) / n_joints as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * j as f64;
            [r * th.cos(), y, r * th.sin()]
        })
        .collect()
}

struct ClassMotion {
    phases: Vec<f64>,
    directions: Vec<[f64; 3]>,
}

fn class_motion(k: usize, rest: &[[f64; 3]]) -> ClassMotion {
    let mut rng = sub_rng_indexed(LIBRARY_SEED, "class", k as u64);
    let mut phases = Vec::with_capacity(rest.len());
    let mut directions = Vec::with_capacity(rest.len());
    for r in rest {
        phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        // random direction with the radial component removed
        loop {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let dot = v[0] * r[0] + v[1] * r[1] + v[2] * r[2];
            let t = [v[0] - dot * r[0], v[1] - dot * r[1], v[2] - dot * r[2]];
            let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            if norm > 1e-3 {
                directions.push([t[0] / norm, t[1] / norm, t[2] / norm]);
                break;
            }
        }
    }
    ClassMotion { phases, directions }
}

/// Class `k` swings joint `j` along the great circle through `rest_j` with
/// tangent `u_{k,j}`: `cos(s)·rest_j + sin(s)·u_{k,j}` for the angle
/// `s = a·sin(2π f_k t + φ_{k,j} + ψ)`, where `ψ` is a random per-sample
/// phase. Clean poses stay on the unit sphere. Gaussian noise of std `noise`
/// is added per coordinate.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.per_class < 1 {
        return Err(DataError::Invalid("need at least 1 sequence per class".into()));
    }
    if cfg.frames < 1 {
        return Err(DataError::Invalid("need at least 1 frame".into()));
    }
    if !(cfg.fps.is_finite() && cfg.fps > 0.0) {
        return Err(DataError::Invalid(format!("fps must be positive, got {}", cfg.fps)));
    }
    if !(cfg.noise >= 0.0 && cfg.amplitude.is_finite()) {
        return Err(DataError::Invalid("noise must be non-negative and amplitude finite".into()));
    }
    let topology = SkeletonTopology::default_for(cfg.n_joints)?;
    let n = cfg.n_joints;
    let rest = rest_pose(n);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut rng = sub_rng(cfg.seed, "synthetic");
    let mut sequences = Vec::with_capacity(cfg.classes * cfg.per_class);
    for k in 0..cfg.classes {
        let motion = class_motion(k, &rest);
        let omega = std::f64::consts::TAU * class_frequency(k);
        for _ in 0..cfg.per_class {
            let psi = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut frames = Vec::with_capacity(cfg.frames * n * 3);
            for t in 0..cfg.frames {
                let time = t as f64 / cfg.fps;
                for j in 0..n {
                    let s = cfg.amplitude * (omega * time + motion.phases[j] + psi).sin();
                    let (sin, cos) = s.sin_cos();
                    for c in 0..3 {
                        frames.push(cos * rest[j][c] + sin * motion.directions[j][c] + noise.sample(&mut rng));
                    }
                }
            }
            sequences.push(PoseSequence {
                frames,
                n_joints: n,
                label: Some(class_label(k)),
            });
        }
    }
    Ok(Dataset {
        topology,
        sequences,
        labels: (0..cfg.classes).map(class_label).collect(),
        fps: cfg.fps,
    })
}

/// One `(observed, future)` cut of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
}

/// Non-overlapping windows of `tau + horizon` frames from every sequence.
/// Every sequence must hold at least one window.
pub fn windows(ds: &Dataset, tau: usize, horizon: usize) -> Result<Vec<Window>> {
    let len = tau + horizon;
    let mut out = Vec::new();
    for (i, seq) in ds.sequences.iter().enumerate() {
        let frames = seq.n_frames();
        if frames < len {
            return Err(DataError::TooShort {
                sequence: i,
                frames,
                needed: len,
            });
        }
        out.extend((0..=frames - len).step_by(len).map(|start| Window { sequence: i, start }));
    }
    Ok(out)
}

/// Seeded shuffle into `(train, validation)`. A positive fraction always
/// leaves at least one window on each side when there are two or more.
pub fn split(windows: &[Window], val_fraction: f64, seed: u64) -> (Vec<Window>, Vec<Window>) {
    let mut shuffled = windows.to_vec();
    shuffled.shuffle(&mut sub_rng(seed, "split"));
    let n = shuffled.len();
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let n_val = n_val.min(n);
    let val = shuffled.split_off(n - n_val);
    (shuffled, val)
}

/// A batch laid out for the model: time first, then batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[τ, B, N, 3]`.
    pub x_prev: Tensor,
    /// `[horizon, B, N, 3]`.
    pub x_fut: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn gather(ds: &Dataset, windows: &[Window], tau: usize, horizon: usize) -> Result<Batch> {
        if windows.is_empty() {
            return Err(DataError::Invalid("empty batch".into()));
        }
        let (b, n) = (windows.len(), ds.n_joints());
        let per = n * 3;
        let mut prev = vec![0.0; tau * b * per];
        let mut fut = vec![0.0; horizon * b * per];
        let mut labels = Vec::with_capacity(b);
        for (bi, w) in windows.iter().enumerate() {
            let seq = &ds.sequences[w.sequence];
            for t in 0..tau {
                prev[(t * b + bi) * per..(t * b + bi + 1) * per].copy_from_slice(seq.frame(w.start + t));
            }
            for t in 0..horizon {
                fut[(t * b + bi) * per..(t * b + bi + 1) * per].copy_from_slice(seq.frame(w.start + tau + t));
            }
            labels.push(seq.label.as_deref().and_then(|l| ds.label_index(l)));
        }
        let shape = |t| [t, b, n, 3];
        Ok(Batch {
            x_prev: Tensor::new(&shape(tau), prev).map_err(|e| DataError::Invalid(e.to_string()))?,
            x_fut: Tensor::new(&shape(horizon), fut).map_err(|e| DataError::Invalid(e.to_string()))?,
            labels,
        })
    }
}

/// Mean absolute error over every sample, joint and coordinate at each
/// 1-based horizon frame. `pred` and `truth` are `[h, ...]`.
pub fn mae(pred: &Tensor, truth: &Tensor, horizons: &[usize]) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.shape().is_empty() {
        return Err(DataError::Invalid(format!(
            "prediction shape {:?} differs from truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let h = pred.shape()[0];
    let per = pred.numel() / h;
    horizons
        .iter()
        .map(|&k| {
            if k == 0 || k > h {
                return Err(DataError::Invalid(format!("horizon {k} outside 1..={h}")));
            }
            let range = (k - 1) * per..k * per;
            let sum: f64 = pred.data()[range.clone()]
                .iter()
                .zip(&truth.data()[range])
                .map(|(a, b)| (a - b).abs())
                .sum();
            Ok(sum / per as f64)
        })
        .collect()
}

/// Repeats the last observed frame of `x_prev` (`[τ, ...]`) `horizon` times.
pub fn zerov_baseline(x_prev: &Tensor, horizon: usize) -> Tensor {
    let tau = x_prev.shape()[0];
    let per = x_prev.numel() / tau;
    let last = &x_prev.data()[(tau - 1) * per..];
    let mut shape = x_prev.shape().to_vec();
    shape[0] = horizon;
    Tensor::from_fn(&shape, |i| last[i % per])
}

pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(DataError::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(DataError::Invalid("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(truths).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn horizon_ms(frame: usize, fps: f64) -> f64 {
    frame as f64 * 1000.0 / fps
}

/// Rows are true labels, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let l = labels.len();
        Self {
            labels,
            counts: vec![vec![0; l]; l],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(9);
        write!(f, "{:>width$}", "true\\pred")?;
        for l in &self.labels {
            write!(f, " {l:>width$}")?;
        }
        writeln!(f)?;
        for (l, row) in self.labels.iter().zip(&self.counts) {
            write!(f, "{l:>width$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
